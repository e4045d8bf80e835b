//! Pixel tensors, the fixed family of natural image transformations, and the
//! stochastic augmentation pipeline applied before them.
//!
//! All pixel values live in `[0, 1]` as `f64`; quantization to 8 bits only
//! happens at PNG export.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Luma weights used by [`TransformId::Grayscale`].
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
/// Multiplier applied around the 0.5 pivot by [`TransformId::ContrastEnhance`].
pub const CONTRAST_FACTOR: f64 = 1.3;
/// Exponent applied by [`TransformId::GammaCorrect`].
pub const GAMMA_EXPONENT: f64 = 0.85;
/// Width of the box kernel used by [`TransformId::HorizontalBlur3`].
pub const BLUR_WIDTH: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("invalid image: {0}")]
    InvalidInput(String),
    #[error("transform {transform} is not supported for {channels}-channel images")]
    UnsupportedTransform { transform: TransformId, channels: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("png i/o failed for {path}: {source}")]
    Png {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// A `height x width x channels` pixel array stored row-major as
/// `(row, column, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::InvalidInput(format!("dimensions must be positive, got {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::InvalidInput(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(ImageError::InvalidInput(format!(
                "expected {} pixel values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(ImageError::InvalidInput(format!("non-finite pixel value at index {i}")));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(ImageError::InvalidInput(format!("pixel value {} at index {i} outside [0, 1]", pixels[i])));
        }
        Ok(Self { height, width, channels, pixels })
    }

    /// Builds an image by clamping every value into `[0, 1]`. Non-finite
    /// values are still rejected.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut pixels: Vec<f64>,
    ) -> Result<Self, ImageError> {
        for p in pixels.iter_mut() {
            if p.is_finite() {
                *p = p.clamp(0.0, 1.0);
            }
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[self.index(row, col, ch)]
    }

    /// Same shape, new pixel values: every value is clamped into `[0, 1]`.
    fn with_pixels(&self, mut pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        for p in pixels.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
        Self { height: self.height, width: self.width, channels: self.channels, pixels }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_pixels(self.pixels.iter().map(|&p| f(p)).collect())
    }
}

/// The fixed transformation family. The ordinal is the canonical row order of
/// the joint score representation, with the null transformation first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformId {
    Identity,
    HorizontalFlip,
    HorizontalBlur3,
    Grayscale,
    ContrastEnhance,
    GammaCorrect,
}

impl TransformId {
    pub const ALL: [TransformId; 6] = [
        TransformId::Identity,
        TransformId::HorizontalFlip,
        TransformId::HorizontalBlur3,
        TransformId::Grayscale,
        TransformId::ContrastEnhance,
        TransformId::GammaCorrect,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        Self::ALL.get(ordinal).copied()
    }

    /// Canonical name used in score tables and directory layouts.
    pub fn name(self) -> &'static str {
        match self {
            TransformId::Identity => "identity",
            TransformId::HorizontalFlip => "horizontal_flip",
            TransformId::HorizontalBlur3 => "horizontal_blur3",
            TransformId::Grayscale => "grayscale",
            TransformId::ContrastEnhance => "contrast_enhance",
            TransformId::GammaCorrect => "gamma_correct",
        }
    }
}

impl fmt::Display for TransformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformId {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| ImageError::InvalidArgument(format!("unknown transform name {s:?}")))
    }
}

pub fn apply_transform(image: &ImageTensor, transform: TransformId) -> Result<ImageTensor, ImageError> {
    match transform {
        TransformId::Identity => Ok(image.clone()),
        TransformId::HorizontalFlip => Ok(flip_horizontal(image)),
        TransformId::HorizontalBlur3 => Ok(horizontal_box_blur(image, BLUR_WIDTH)),
        TransformId::Grayscale => grayscale(image),
        TransformId::ContrastEnhance => Ok(image.map(|p| 0.5 + CONTRAST_FACTOR * (p - 0.5))),
        TransformId::GammaCorrect => Ok(image.map(|p| p.powf(GAMMA_EXPONENT))),
    }
}

/// Applies each transform of `set` to `image`, preserving order.
pub fn transform_batch(image: &ImageTensor, set: &[TransformId]) -> Result<Vec<ImageTensor>, ImageError> {
    validate_transform_set(set)?;
    set.iter().map(|&t| apply_transform(image, t)).collect()
}

pub(crate) fn validate_transform_set(set: &[TransformId]) -> Result<(), ImageError> {
    if set.is_empty() {
        return Err(ImageError::InvalidArgument("transform set is empty".into()));
    }
    for (i, t) in set.iter().enumerate() {
        if set[..i].contains(t) {
            return Err(ImageError::InvalidArgument(format!("duplicate transform {t}")));
        }
    }
    Ok(())
}

fn flip_horizontal(image: &ImageTensor) -> ImageTensor {
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut out = Vec::with_capacity(image.pixels.len());
    for row in 0..h {
        for col in (0..w).rev() {
            let start = image.index(row, col, 0);
            out.extend_from_slice(&image.pixels[start..start + c]);
        }
    }
    image.with_pixels(out)
}

/// Box blur along rows with replicated borders.
fn horizontal_box_blur(image: &ImageTensor, width: usize) -> ImageTensor {
    let (h, w, c) = (image.height, image.width, image.channels);
    let radius = (width / 2) as isize;
    let norm = 1.0 / width as f64;
    let mut out = vec![0.0; image.pixels.len()];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for offset in -radius..=radius {
                    let src = (col as isize + offset).clamp(0, w as isize - 1) as usize;
                    acc += image.get(row, src, ch);
                }
                out[image.index(row, col, ch)] = acc * norm;
            }
        }
    }
    image.with_pixels(out)
}

fn grayscale(image: &ImageTensor) -> Result<ImageTensor, ImageError> {
    if image.channels != 3 {
        return Err(ImageError::UnsupportedTransform { transform: TransformId::Grayscale, channels: image.channels });
    }
    let mut out = Vec::with_capacity(image.pixels.len());
    for rgb in image.pixels.chunks_exact(3) {
        let luma = LUMA_WEIGHTS[0] * rgb[0] + LUMA_WEIGHTS[1] * rgb[1] + LUMA_WEIGHTS[2] * rgb[2];
        out.extend_from_slice(&[luma, luma, luma]);
    }
    Ok(image.with_pixels(out))
}

/// Random training-time augmentation. Draw order per call is fixed: flip,
/// brightness, contrast, then crop offsets; every draw is consumed even when
/// the corresponding adjustment is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_probability: f64,
    /// Maximum absolute additive brightness shift, in pixel units.
    pub brightness_delta_max: f64,
    /// `(min, max)` contrast multiplier around the 0.5 pivot.
    pub contrast_jitter_range: (f64, f64),
    #[serde(default)]
    pub crop_fraction: Option<f64>,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            brightness_delta_max: 0.1,
            contrast_jitter_range: (0.8, 1.2),
            crop_fraction: None,
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// A configuration that leaves every image unchanged.
    pub fn disabled(rng_seed: u64) -> Self {
        Self {
            flip_probability: 0.0,
            brightness_delta_max: 0.0,
            contrast_jitter_range: (1.0, 1.0),
            crop_fraction: None,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(ImageError::InvalidArgument(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        if !(self.brightness_delta_max >= 0.0 && self.brightness_delta_max.is_finite()) {
            return Err(ImageError::InvalidArgument(format!(
                "brightness_delta_max must be a finite non-negative value, got {}",
                self.brightness_delta_max
            )));
        }
        let (lo, hi) = self.contrast_jitter_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(ImageError::InvalidArgument(format!(
                "contrast_jitter_range must satisfy 0 <= min <= max, got ({lo}, {hi})"
            )));
        }
        if let Some(f) = self.crop_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ImageError::InvalidArgument(format!("crop_fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn augment<R: Rng + ?Sized>(
    image: &ImageTensor,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<ImageTensor, ImageError> {
    cfg.validate()?;
    let flip = rng.random::<f64>() < cfg.flip_probability;
    let brightness = (2.0 * rng.random::<f64>() - 1.0) * cfg.brightness_delta_max;
    let (lo, hi) = cfg.contrast_jitter_range;
    let contrast = lo + (hi - lo) * rng.random::<f64>();
    let crop_u = rng.random::<f64>();
    let crop_v = rng.random::<f64>();

    let mut out = if flip { flip_horizontal(image) } else { image.clone() };
    if brightness != 0.0 || contrast != 1.0 {
        out = out.map(|p| 0.5 + contrast * (p + brightness - 0.5));
    }
    if let Some(fraction) = cfg.crop_fraction {
        if fraction < 1.0 {
            out = crop_and_resize(&out, fraction, crop_u, crop_v);
        }
    }
    Ok(out)
}

/// Crops a window of `fraction` of each side, placed at relative offsets
/// `(u, v)` in `[0, 1)`, and resizes back to the original shape with bilinear
/// interpolation.
fn crop_and_resize(image: &ImageTensor, fraction: f64, u: f64, v: f64) -> ImageTensor {
    let (h, w, c) = (image.height, image.width, image.channels);
    let crop_h = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let crop_w = ((w as f64 * fraction).round() as usize).clamp(1, w);
    let top = ((h - crop_h) as f64 * u).floor() as usize;
    let left = ((w - crop_w) as f64 * v).floor() as usize;

    let scale_y = crop_h as f64 / h as f64;
    let scale_x = crop_w as f64 / w as f64;
    let mut out = vec![0.0; image.pixels.len()];
    for row in 0..h {
        // Pixel-center alignment.
        let sy = ((row as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (crop_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(crop_h - 1);
        let fy = sy - y0 as f64;
        for col in 0..w {
            let sx = ((col as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (crop_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(crop_w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let p00 = image.get(top + y0, left + x0, ch);
                let p01 = image.get(top + y0, left + x1, ch);
                let p10 = image.get(top + y1, left + x0, ch);
                let p11 = image.get(top + y1, left + x1, ch);
                let top_mix = p00 + (p01 - p00) * fx;
                let bottom_mix = p10 + (p11 - p10) * fx;
                out[image.index(row, col, ch)] = top_mix + (bottom_mix - top_mix) * fy;
            }
        }
    }
    image.with_pixels(out)
}

/// Reads an 8-bit PNG. Gray images load as one channel, everything else as RGB
/// (alpha is dropped).
pub fn load_png(path: &Path) -> Result<ImageTensor, ImageError> {
    let decoded = image::open(path).map_err(|source| ImageError::Png { path: path.display().to_string(), source })?;
    let (pixels, channels, width, height) = match decoded.color().channel_count() {
        1 | 2 => {
            let luma = decoded.to_luma8();
            let (w, h) = luma.dimensions();
            (luma.into_raw(), 1, w, h)
        }
        _ => {
            let rgb = decoded.to_rgb8();
            let (w, h) = rgb.dimensions();
            (rgb.into_raw(), 3, w, h)
        }
    };
    let values = pixels.into_iter().map(|b| b as f64 / 255.0).collect();
    ImageTensor::new(height as usize, width as usize, channels, values)
}

/// Quantizes each pixel to `round(p * 255)`.
pub fn quantize(image: &ImageTensor) -> Vec<u8> {
    image.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn save_png(image: &ImageTensor, path: &Path) -> Result<(), ImageError> {
    let color = if image.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer_with_format(
        path,
        &quantize(image),
        image.width as u32,
        image.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|source| ImageError::Png { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rgb(pixels: &[[f64; 3]]) -> ImageTensor {
        ImageTensor::new(1, pixels.len(), 3, pixels.iter().flatten().copied().collect()).unwrap()
    }

    fn gray_row(values: &[f64]) -> ImageTensor {
        ImageTensor::new(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn flip_swaps_columns() {
        let img = gray_row(&[0.1, 0.7]);
        let flipped = apply_transform(&img, TransformId::HorizontalFlip).unwrap();
        assert_eq!(flipped.pixels(), &[0.7, 0.1]);
    }

    #[test]
    fn grayscale_of_pure_red() {
        let img = rgb(&[[1.0, 0.0, 0.0]]);
        let g = apply_transform(&img, TransformId::Grayscale).unwrap();
        for &p in g.pixels() {
            assert!((p - 0.299).abs() < 1e-15);
        }
    }

    #[test]
    fn gamma_of_quarter() {
        // 0.25^0.85 = 0.307786103336229071 (30-digit reference)
        let g = apply_transform(&gray_row(&[0.25]), TransformId::GammaCorrect).unwrap();
        assert!((g.pixels()[0] - 0.307_786_103_336_229).abs() < 1e-14);
    }

    #[test]
    fn blur_replicates_border() {
        let b = apply_transform(&gray_row(&[0.0, 0.9, 0.0]), TransformId::HorizontalBlur3).unwrap();
        for &p in b.pixels() {
            assert!((p - 0.3).abs() < 1e-15, "{p}");
        }
    }

    #[test]
    fn contrast_around_pivot() {
        let c = apply_transform(&gray_row(&[0.8, 0.5, 0.0, 1.0]), TransformId::ContrastEnhance).unwrap();
        let expected = [0.89, 0.5, 0.0, 1.0];
        for (p, e) in c.pixels().iter().zip(expected) {
            assert!((p - e).abs() < 1e-12, "{p} vs {e}");
        }
    }

    #[test]
    fn grayscale_rejects_single_channel() {
        let err = apply_transform(&gray_row(&[0.5]), TransformId::Grayscale).unwrap_err();
        assert!(matches!(err, ImageError::UnsupportedTransform { channels: 1, .. }));
    }

    #[test]
    fn rejects_non_finite_and_out_of_range() {
        assert!(matches!(ImageTensor::new(1, 1, 1, vec![f64::NAN]), Err(ImageError::InvalidInput(_))));
        assert!(ImageTensor::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn batch_preserves_order_and_rejects_duplicates() {
        let img = rgb(&[[0.2, 0.4, 0.6], [0.9, 0.1, 0.3]]);
        let single = transform_batch(&img, &[TransformId::Identity]).unwrap();
        assert_eq!(single, vec![img.clone()]);
        let pair = transform_batch(&img, &[TransformId::Identity, TransformId::HorizontalFlip]).unwrap();
        assert_eq!(pair[0], img);
        assert_eq!(pair[1], apply_transform(&img, TransformId::HorizontalFlip).unwrap());
        assert!(transform_batch(&img, &[TransformId::HorizontalFlip, TransformId::HorizontalFlip]).is_err());
        assert!(transform_batch(&img, &[]).is_err());
    }

    #[test]
    fn transform_names_round_trip() {
        for t in TransformId::ALL {
            assert_eq!(t.name().parse::<TransformId>().unwrap(), t);
            assert_eq!(TransformId::from_ordinal(t.ordinal()), Some(t));
        }
        assert_eq!(TransformId::Identity.ordinal(), 0);
        assert!("sharpen".parse::<TransformId>().is_err());
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = rgb(&[[0.2, 0.4, 0.6], [0.9, 0.1, 0.3]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&img, &AugmentationConfig::disabled(3), &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let img = ImageTensor::new(4, 4, 3, (0..48).map(|i| i as f64 / 47.0).collect()).unwrap();
        let cfg = AugmentationConfig { crop_fraction: Some(0.75), ..AugmentationConfig::default() };
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn brightness_stays_clamped() {
        let img = ImageTensor::filled(3, 3, 3, 1.0).unwrap();
        let cfg = AugmentationConfig {
            flip_probability: 0.0,
            brightness_delta_max: 0.5,
            contrast_jitter_range: (1.0, 1.0),
            crop_fraction: None,
            rng_seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let out = augment(&img, &cfg, &mut rng).unwrap();
            assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn full_crop_resize_is_identity() {
        let img = ImageTensor::new(3, 5, 1, (0..15).map(|i| i as f64 / 14.0).collect()).unwrap();
        let out = crop_and_resize(&img, 1.0, 0.3, 0.7);
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_augmentation_config() {
        let bad = AugmentationConfig { flip_probability: 1.5, ..AugmentationConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig { crop_fraction: Some(0.0), ..AugmentationConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ImageTensor::new(2, 3, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (2, 3, 3));
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(quantize(&back), quantize(&img));
    }

    fn arb_image() -> impl Strategy<Value = ImageTensor> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0f64..=1.0, h * w * 3)
                .prop_map(move |px| ImageTensor::new(h, w, 3, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(img in arb_image()) {
            let twice = apply_transform(&apply_transform(&img, TransformId::HorizontalFlip).unwrap(), TransformId::HorizontalFlip).unwrap();
            prop_assert_eq!(twice, img);
        }

        #[test]
        fn transforms_preserve_shape_and_bounds(img in arb_image()) {
            for t in TransformId::ALL {
                let out = apply_transform(&img, t).unwrap();
                prop_assert_eq!((out.height(), out.width(), out.channels()), (img.height(), img.width(), img.channels()));
                prop_assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert_eq!(apply_transform(&img, t).unwrap(), out);
            }
        }
    }
}
