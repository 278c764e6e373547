//! Image preprocessing: border trimming, resize + normalization, and
//! geometry-only augmentation.
//!
//! Augmentation is deliberately restricted to flips and scaling; color-space
//! transforms would destroy the palette cues the labels depend on.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CropBox;
use crate::error::{Error, Result};

static NEXT_IMAGE_ID: AtomicU64 = AtomicU64::new(1);

/// 8-bit RGB raster image, interleaved row-major.
#[derive(Debug, Clone)]
pub struct RasterImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
    /// Process-unique id; downstream caches may key on it.
    id: u64,
}

impl PartialEq for RasterImage {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.data == other.data
    }
}

impl RasterImage {
    pub fn from_pixels(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimension("image dimensions must be >= 1".into()));
        }
        if data.len() != (width * height * 3) as usize {
            return Err(Error::InvalidDimension(format!(
                "pixel buffer length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(RasterImage { width, height, data, id: NEXT_IMAGE_ID.fetch_add(1, Ordering::Relaxed) })
    }

    /// Constant-color image, mostly useful in tests.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::from_pixels(width, height, data)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::ImageDecode { path: path.to_path_buf(), source: e })?
            .to_rgb8();
        Self::from_pixels(img.width(), img.height(), img.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb_image()
            .save(path)
            .map_err(|e| Error::ImageEncode { path: path.to_path_buf(), source: e })
    }

    fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length matches dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::DegenerateCrop);
        }
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::CropOutOfBounds {
                x: x0,
                y: y0,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for y in y0..y0 + h {
            let start = ((y * self.width + x0) * 3) as usize;
            data.extend_from_slice(&self.data[start..start + (w * 3) as usize]);
        }
        Self::from_pixels(w, h, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(x, y));
            }
        }
        Self::from_pixels(self.width, self.height, data).expect("same dimensions")
    }

    pub fn flip_vertical(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            let start = (y * self.width * 3) as usize;
            data.extend_from_slice(&self.data[start..start + (self.width * 3) as usize]);
        }
        Self::from_pixels(self.width, self.height, data).expect("same dimensions")
    }

    /// Bilinear resize to exactly `width` x `height`.
    pub fn resize(&self, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimension("resize target must be >= 1".into()));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let resized =
            image::imageops::resize(&self.to_rgb_image(), width, height, FilterType::Triangle);
        Self::from_pixels(width, height, resized.into_raw())
    }
}

/// Input geometry and normalization statistics for one backbone family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneProfile {
    pub name: String,
    pub input_side: u32,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
    pub gap_dim: usize,
}

/// ImageNet channel statistics used by the torch-style model zoo.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

impl BackboneProfile {
    pub fn new(
        name: impl Into<String>,
        input_side: u32,
        channel_mean: [f32; 3],
        channel_std: [f32; 3],
        gap_dim: usize,
    ) -> Result<Self> {
        if input_side == 0 {
            return Err(Error::InvalidDimension("input_side must be >= 1".into()));
        }
        if gap_dim == 0 {
            return Err(Error::InvalidDimension("gap_dim must be >= 1".into()));
        }
        if channel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidDimension("channel_std must be positive".into()));
        }
        Ok(BackboneProfile {
            name: name.into(),
            input_side,
            channel_mean,
            channel_std,
            gap_dim,
        })
    }

    pub fn vgg16() -> Self {
        Self::new("vgg16", 224, IMAGENET_MEAN, IMAGENET_STD, 512).expect("valid profile")
    }

    pub fn resnet50() -> Self {
        Self::new("resnet50", 224, IMAGENET_MEAN, IMAGENET_STD, 2048).expect("valid profile")
    }

    pub fn efficientnet_b0() -> Self {
        Self::new("efficientnetb0", 224, IMAGENET_MEAN, IMAGENET_STD, 1280).expect("valid profile")
    }

    /// Inception keeps its 299-pixel input and [-1, 1] scaling.
    pub fn inception_v3() -> Self {
        Self::new("inceptionv3", 299, [0.5; 3], [0.5; 3], 2048).expect("valid profile")
    }
}

/// Float tensor of shape `(input_side, input_side, 3)`, channel-last,
/// after mean/std normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTensor {
    side: usize,
    values: Vec<f32>,
    source_id: u64,
}

impl NormalizedTensor {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.side, self.side, 3)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Id of the raster this tensor was produced from.
    pub fn source_id(&self) -> u64 {
        self.source_id
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.side + x) * 3 + c]
    }
}

/// How the frame/background margin is removed before resizing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrimPolicy {
    /// Crop exactly to a curator-supplied box.
    ManifestBox(CropBox),
    /// Strip uniform-color margins automatically.
    Heuristic { tolerance: f32 },
    /// Leave the image untouched.
    None,
}

impl TrimPolicy {
    /// Default automatic policy: per-channel variance below 4.0 (in 8-bit
    /// units) marks a margin row/column.
    pub fn heuristic_default() -> Self {
        TrimPolicy::Heuristic { tolerance: 4.0 }
    }
}

/// Removes the frame margin per `policy`.
///
/// The heuristic strips maximal uniform-color margin runs but refuses to
/// remove more than 25% of a dimension; oversized margins are left intact.
/// A degenerate (zero-area) result errors unless `permissive`, which returns
/// the original image instead.
pub fn trim_border(image: &RasterImage, policy: &TrimPolicy, permissive: bool) -> Result<RasterImage> {
    let attempt = match policy {
        TrimPolicy::None => Ok(image.clone()),
        TrimPolicy::ManifestBox(b) => image.crop(b.x, b.y, b.w, b.h),
        TrimPolicy::Heuristic { tolerance } => heuristic_trim(image, *tolerance),
    };
    match attempt {
        Err(Error::DegenerateCrop) if permissive => Ok(image.clone()),
        other => other,
    }
}

fn row_uniform(image: &RasterImage, y: u32, x0: u32, x1: u32, tol: f32) -> bool {
    line_uniform(image, tol, (x0..x1).map(move |x| (x, y)))
}

fn col_uniform(image: &RasterImage, x: u32, y0: u32, y1: u32, tol: f32) -> bool {
    line_uniform(image, tol, (y0..y1).map(move |y| (x, y)))
}

fn line_uniform(image: &RasterImage, tol: f32, coords: impl Iterator<Item = (u32, u32)>) -> bool {
    let mut n = 0f64;
    let mut sum = [0f64; 3];
    let mut sum_sq = [0f64; 3];
    for (x, y) in coords {
        let px = image.pixel(x, y);
        for c in 0..3 {
            let v = px[c] as f64;
            sum[c] += v;
            sum_sq[c] += v * v;
        }
        n += 1.0;
    }
    if n == 0.0 {
        return true;
    }
    (0..3).all(|c| {
        let mean = sum[c] / n;
        let var = (sum_sq[c] / n - mean * mean).max(0.0);
        var < tol as f64
    })
}

/// Strips uniform margin rows/columns one at a time until none remain,
/// optionally with one axis frozen.
fn margin_fixpoint(
    image: &RasterImage,
    tol: f32,
    trim_rows: bool,
    trim_cols: bool,
) -> (u32, u32, u32, u32) {
    let (mut x0, mut y0, mut x1, mut y1) = (0u32, 0u32, image.width(), image.height());
    loop {
        let mut changed = false;
        if trim_rows && y1 - y0 > 1 && row_uniform(image, y0, x0, x1, tol) {
            y0 += 1;
            changed = true;
        }
        if trim_rows && y1 - y0 > 1 && row_uniform(image, y1 - 1, x0, x1, tol) {
            y1 -= 1;
            changed = true;
        }
        if trim_cols && x1 - x0 > 1 && col_uniform(image, x0, y0, y1, tol) {
            x0 += 1;
            changed = true;
        }
        if trim_cols && x1 - x0 > 1 && col_uniform(image, x1 - 1, y0, y1, tol) {
            x1 -= 1;
            changed = true;
        }
        if !changed {
            return (x0, y0, x1, y1);
        }
    }
}

fn heuristic_trim(image: &RasterImage, tol: f32) -> Result<RasterImage> {
    // A margin larger than a quarter of a dimension is likely painting
    // content, not a frame: that axis is frozen and the scan rerun. Flags
    // only ever flip toward frozen, so this settles within three passes.
    let mut trim_rows = true;
    let mut trim_cols = true;
    loop {
        let (x0, y0, x1, y1) = margin_fixpoint(image, tol, trim_rows, trim_cols);
        if trim_rows && 4 * (image.height() - (y1 - y0)) > image.height() {
            trim_rows = false;
            continue;
        }
        if trim_cols && 4 * (image.width() - (x1 - x0)) > image.width() {
            trim_cols = false;
            continue;
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::DegenerateCrop);
        }
        return image.crop(x0, y0, x1 - x0, y1 - y0);
    }
}

/// Bilinear-resizes to the profile's input square, scales to [0, 1], then
/// applies per-channel `(x - mean) / std`.
pub fn resize_normalize(image: &RasterImage, profile: &BackboneProfile) -> Result<NormalizedTensor> {
    let resized = image.resize(profile.input_side, profile.input_side)?;
    let side = profile.input_side as usize;
    let mut values = Vec::with_capacity(side * side * 3);
    for px in resized.pixels().chunks_exact(3) {
        for (c, &p) in px.iter().enumerate() {
            let scaled = p as f32 / 255.0;
            values.push((scaled - profile.channel_mean[c]) / profile.channel_std[c]);
        }
    }
    Ok(NormalizedTensor { side, values, source_id: image.id() })
}

/// Random scale factor range for the scaling variant.
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);

/// Emits the geometry-only augmentation set for one image: horizontal flip,
/// vertical flip, and a seeded random scale restored to the original size by
/// center crop/pad. No color channel is ever touched.
pub fn augment(image: &RasterImage, seed: u64) -> Vec<RasterImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    vec![
        image.flip_horizontal(),
        image.flip_vertical(),
        scale_restore(image, scale),
    ]
}

/// Scales by `factor`, then center-crops or edge-pads back to the original
/// geometry.
fn scale_restore(image: &RasterImage, factor: f64) -> RasterImage {
    let (w, h) = (image.width(), image.height());
    let sw = ((w as f64 * factor).round() as u32).max(1);
    let sh = ((h as f64 * factor).round() as u32).max(1);
    let scaled = image.resize(sw, sh).expect("positive target dimensions");
    if sw == w && sh == h {
        return scaled;
    }

    let mut data = Vec::with_capacity((w * h * 3) as usize);
    // Offsets of the original canvas inside the scaled image (may be
    // negative when padding).
    let dx = (sw as i64 - w as i64) / 2;
    let dy = (sh as i64 - h as i64) / 2;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let sx = (x + dx).clamp(0, sw as i64 - 1) as u32;
            let sy = (y + dy).clamp(0, sh as i64 - 1) as u32;
            data.extend_from_slice(&scaled.pixel(sx, sy));
        }
    }
    RasterImage::from_pixels(w, h, data).expect("same dimensions")
}
