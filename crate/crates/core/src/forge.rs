//! Forgery synthesis: JPEG format alignment, inpaint blending, copy-move and
//! splicing, plus the per-category label table.

use std::fmt;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quality used when re-encoding generated images.
pub const DEFAULT_JPEG_QUALITY: u8 = 96;

/// Default maximum perturbation of the inpaint stand-in outside its mask.
pub const DEFAULT_STUB_EPSILON: f64 = 2.0 / 255.0;

/// Mask value for a positive (manipulated / AI) pixel.
pub const MASK_ON: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceCategory {
    #[serde(rename = "real")]
    Real,
    #[serde(rename = "inpaint")]
    Inpaint,
    #[serde(rename = "inpaint_blended")]
    InpaintBlended,
    #[serde(rename = "copymove")]
    CopyMove,
    #[serde(rename = "splicing")]
    Splicing,
}

impl SourceCategory {
    pub const ALL: [SourceCategory; 5] = [
        SourceCategory::Real,
        SourceCategory::Inpaint,
        SourceCategory::InpaintBlended,
        SourceCategory::CopyMove,
        SourceCategory::Splicing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceCategory::Real => "real",
            SourceCategory::Inpaint => "inpaint",
            SourceCategory::InpaintBlended => "inpaint_blended",
            SourceCategory::CopyMove => "copymove",
            SourceCategory::Splicing => "splicing",
        }
    }

    /// Whether samples of this category contain generator-synthesized pixels.
    pub fn has_ai_pixels(self) -> bool {
        matches!(self, SourceCategory::Inpaint | SourceCategory::InpaintBlended)
    }
}

impl fmt::Display for SourceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown source category `{s}`")))
    }
}

/// Classification and per-region segmentation targets for one category.
///
/// `mani_*` / `ai_*` give the mask value outside (`bg`) and inside (`fg`) the
/// edited region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelConfig {
    pub cls: u8,
    pub mani_bg: u8,
    pub mani_fg: u8,
    pub ai_bg: u8,
    pub ai_fg: u8,
}

impl LabelConfig {
    pub const fn new(cls: u8, mani_bg: u8, mani_fg: u8, ai_bg: u8, ai_fg: u8) -> Self {
        Self {
            cls,
            mani_bg,
            mani_fg,
            ai_bg,
            ai_fg,
        }
    }

    pub fn as_tuple(self) -> (u8, u8, u8, u8, u8) {
        (self.cls, self.mani_bg, self.mani_fg, self.ai_bg, self.ai_fg)
    }
}

/// Label row for a source category.
///
/// Only images containing synthesized pixels are labeled positive for
/// classification; copy-move and splicing rearrange real pixels and stay 0.
pub fn assign_labels(category: SourceCategory) -> LabelConfig {
    match category {
        SourceCategory::Real => LabelConfig::new(0, 0, 0, 0, 0),
        SourceCategory::Inpaint => LabelConfig::new(1, 0, 1, 1, 1),
        SourceCategory::InpaintBlended => LabelConfig::new(1, 0, 1, 0, 1),
        SourceCategory::CopyMove => LabelConfig::new(0, 0, 1, 0, 0),
        SourceCategory::Splicing => LabelConfig::new(0, 0, 1, 0, 0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && py >= self.y && px - self.x < self.width && py - self.y < self.height
    }

    fn fits(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.width as u64 <= width as u64
            && self.y as u64 + self.height as u64 <= height as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// Ground-truth masks of one sample, stored as `{0, 255}` grayscale images.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub mani: GrayImage,
    pub ai: GrayImage,
}

impl MaskPair {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            mani: GrayImage::new(width, height),
            ai: GrayImage::new(width, height),
        }
    }

    /// Masks for an edited `region` under `labels`.
    pub fn from_labels(width: u32, height: u32, region: &GrayImage, labels: LabelConfig) -> Self {
        let paint = |bg: u8, fg: u8| {
            GrayImage::from_fn(width, height, |x, y| {
                let inside = region.get_pixel(x, y)[0] != 0;
                let on = if inside { fg } else { bg };
                Luma([if on == 1 { MASK_ON } else { 0 }])
            })
        };
        Self {
            mani: paint(labels.mani_bg, labels.mani_fg),
            ai: paint(labels.ai_bg, labels.ai_fg),
        }
    }
}

/// Binary `{0, 255}` mask with `rect` switched on.
pub fn rect_mask(width: u32, height: u32, rect: Rect) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        Luma([if rect.contains(x, y) { MASK_ON } else { 0 }])
    })
}

/// Re-encodes an 8-bit RGB image as a baseline JPEG stream.
pub fn jpeg_align(image: &DynamicImage, quality: u8) -> Result<Vec<u8>> {
    match image {
        DynamicImage::ImageRgb8(rgb) => jpeg_encode_rgb(rgb, quality),
        other => Err(Error::Format(format!(
            "expected 8-bit RGB, got {:?}",
            other.color()
        ))),
    }
}

pub fn jpeg_encode_rgb(image: &RgbImage, quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!(
            "JPEG quality {quality} outside [1, 100]"
        )));
    }
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality).encode_image(image)?;
    Ok(out)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

/// JPEG encode then decode at `quality`.
pub fn jpeg_roundtrip(image: &RgbImage, quality: u8) -> Result<RgbImage> {
    let bytes = jpeg_encode_rgb(image, quality)?;
    Ok(image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)?.to_rgb8())
}

fn check_dims(what: &str, expected: (u32, u32), got: (u32, u32)) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {}x{}",
            got.0, got.1, expected.0, expected.1
        )));
    }
    Ok(())
}

/// Pastes the unmasked area of `original` over `inpainted`.
///
/// Output equals `inpainted` where `mask` is nonzero and `original` elsewhere.
pub fn blend_inpaint(original: &RgbImage, inpainted: &RgbImage, mask: &GrayImage) -> Result<RgbImage> {
    let dims = original.dimensions();
    check_dims("inpainted image", dims, inpainted.dimensions())?;
    check_dims("mask", dims, mask.dimensions())?;
    Ok(RgbImage::from_fn(dims.0, dims.1, |x, y| {
        if mask.get_pixel(x, y)[0] != 0 {
            *inpainted.get_pixel(x, y)
        } else {
            *original.get_pixel(x, y)
        }
    }))
}

fn validate_region(what: &str, rect: Rect, width: u32, height: u32) -> Result<()> {
    if rect.area() == 0 {
        return Err(Error::Region(format!("{what} {rect:?} has zero area")));
    }
    if !rect.fits(width, height) {
        return Err(Error::Region(format!(
            "{what} {rect:?} exceeds {width}x{height} image"
        )));
    }
    Ok(())
}

fn paste(
    base: &RgbImage,
    donor: &RgbImage,
    donor_rect: Rect,
    dst_origin: Point,
) -> Result<(RgbImage, MaskPair)> {
    let (w, h) = base.dimensions();
    validate_region("source rectangle", donor_rect, donor.width(), donor.height())?;
    let dst = Rect::new(dst_origin.x, dst_origin.y, donor_rect.width, donor_rect.height);
    validate_region("destination rectangle", dst, w, h)?;
    let mut out = base.clone();
    for dy in 0..donor_rect.height {
        for dx in 0..donor_rect.width {
            let px = *donor.get_pixel(donor_rect.x + dx, donor_rect.y + dy);
            out.put_pixel(dst.x + dx, dst.y + dy, px);
        }
    }
    let masks = MaskPair {
        mani: rect_mask(w, h, dst),
        ai: GrayImage::new(w, h),
    };
    Ok((out, masks))
}

/// Duplicates `src_rect` of `image` at `dst_origin`.
///
/// The manipulation mask covers the whole destination rectangle even where
/// the copied pixels happen to equal what they overwrite.
pub fn copy_move(image: &RgbImage, src_rect: Rect, dst_origin: Point) -> Result<(RgbImage, MaskPair)> {
    paste(image, image, src_rect, dst_origin)
}

/// Pastes `donor_rect` of `donor` into `base` at `dst_origin`.
pub fn splice(
    base: &RgbImage,
    donor: &RgbImage,
    donor_rect: Rect,
    dst_origin: Point,
) -> Result<(RgbImage, MaskPair)> {
    paste(base, donor, donor_rect, dst_origin)
}

/// Deterministic stand-in for a diffusion inpainting model.
///
/// Pixels under `mask` are replaced by seeded structured noise around the
/// region's mean color. Every other channel value moves by a nonzero step of
/// at most `epsilon` (in `[0, 1]` intensity units), so the whole image is
/// regenerated as a real inpainting pipeline would.
pub fn synth_inpaint_stub(image: &RgbImage, mask: &GrayImage, seed: u64, epsilon: f64) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    check_dims("mask", (w, h), mask.dimensions())?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut mean = [0.0f64; 3];
    let mut count = 0usize;
    for (x, y, px) in image.enumerate_pixels() {
        if mask.get_pixel(x, y)[0] != 0 {
            for c in 0..3 {
                mean[c] += px[c] as f64;
            }
            count += 1;
        }
    }
    if count > 0 {
        mean.iter_mut().for_each(|m| *m /= count as f64);
    }

    // Two oriented gratings per channel plus per-pixel noise.
    let waves: Vec<[f64; 4]> = (0..6)
        .map(|_| {
            [
                rng.random_range(0.4..1.6),
                rng.random_range(0.4..1.6),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(20.0..45.0),
            ]
        })
        .collect();
    let max_step = (epsilon * 255.0).floor() as i32;

    let mut out = RgbImage::new(w, h);
    for (x, y, px) in image.enumerate_pixels() {
        let inside = mask.get_pixel(x, y)[0] != 0;
        let mut o = [0u8; 3];
        for c in 0..3 {
            let v = if inside {
                let mut v = mean[c];
                for [fx, fy, phase, amp] in &waves[2 * c..2 * c + 2] {
                    v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                v + rng.random_range(-24.0..24.0)
            } else if max_step > 0 {
                let mag = rng.random_range(1..=max_step);
                let sign = if rng.random_bool(0.5) { 1 } else { -1 };
                (px[c] as i32 + sign * mag) as f64
            } else {
                px[c] as f64
            };
            o[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out.put_pixel(x, y, Rgb(o));
    }
    Ok(out)
}

/// A forged sample with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ForgedSample {
    pub image: RgbImage,
    pub masks: MaskPair,
    pub category: SourceCategory,
}

impl ForgedSample {
    pub fn labels(&self) -> LabelConfig {
        assign_labels(self.category)
    }
}

/// Forgery recipes the batch driver knows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgeOp {
    Real,
    Inpaint,
    Blend,
    CopyMove,
    Splice,
}

impl ForgeOp {
    pub fn category(self) -> SourceCategory {
        match self {
            ForgeOp::Real => SourceCategory::Real,
            ForgeOp::Inpaint => SourceCategory::Inpaint,
            ForgeOp::Blend => SourceCategory::InpaintBlended,
            ForgeOp::CopyMove => SourceCategory::CopyMove,
            ForgeOp::Splice => SourceCategory::Splicing,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ForgeOp::Real => "real",
            ForgeOp::Inpaint => "inpaint",
            ForgeOp::Blend => "blend",
            ForgeOp::CopyMove => "copymove",
            ForgeOp::Splice => "splice",
        }
    }

    /// Parses a comma-separated op list such as `copymove,splice,blend`.
    pub fn parse_list(s: &str) -> Result<Vec<ForgeOp>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl FromStr for ForgeOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "real" => ForgeOp::Real,
            "inpaint" => ForgeOp::Inpaint,
            "blend" => ForgeOp::Blend,
            "copymove" => ForgeOp::CopyMove,
            "splice" => ForgeOp::Splice,
            other => return Err(Error::InvalidArgument(format!("unknown forge op `{other}`"))),
        })
    }
}

/// Knobs of the batch forging driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeOptions {
    pub seed: u64,
    pub stub_epsilon: f64,
    /// Edited regions span this fraction range of each image side.
    pub region_fraction: (f64, f64),
    /// Region sides and corners snap to multiples of this many pixels.
    pub region_grid: u32,
    pub jpeg_quality: u8,
}

impl Default for ForgeOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            stub_epsilon: DEFAULT_STUB_EPSILON,
            region_fraction: (0.25, 0.5),
            region_grid: 1,
            jpeg_quality: DEFAULT_JPEG_QUALITY,
        }
    }
}

/// Precomputed inpainting output for one source image.
#[derive(Clone, Debug)]
pub struct Inpainted<'a> {
    pub image: &'a RgbImage,
    pub mask: &'a GrayImage,
}

fn random_rect(rng: &mut ChaCha8Rng, w: u32, h: u32, options: &ForgeOptions) -> Rect {
    let (lo, hi) = options.region_fraction;
    let grid = options.region_grid.max(1);
    // Sides are drawn in grid cells; a side never falls below one cell or
    // exceeds the image.
    let side = |rng: &mut ChaCha8Rng, n: u32| {
        let cells = (n / grid).max(1);
        let lo = ((n as f64 * lo / grid as f64).round() as u32).clamp(1, cells);
        let hi = ((n as f64 * hi / grid as f64).round() as u32).clamp(lo, cells);
        (rng.random_range(lo..=hi) * grid).min(n)
    };
    let rw = side(rng, w);
    let rh = side(rng, h);
    let origin = random_origin(rng, w - rw, h - rh, grid);
    Rect::new(origin.x, origin.y, rw, rh)
}

fn random_origin(rng: &mut ChaCha8Rng, free_w: u32, free_h: u32, grid: u32) -> Point {
    let grid = grid.max(1);
    Point::new(
        rng.random_range(0..=free_w / grid) * grid,
        rng.random_range(0..=free_h / grid) * grid,
    )
}

/// Produces one sample of kind `op` from `source`.
///
/// `donor` feeds splicing; `inpainted` replaces the synthetic stand-in when a
/// real inpainting result is available. Randomness is drawn from `seed` only.
pub fn forge_one(
    op: ForgeOp,
    source: &RgbImage,
    donor: &RgbImage,
    inpainted: Option<Inpainted<'_>>,
    seed: u64,
    options: &ForgeOptions,
) -> Result<ForgedSample> {
    let (w, h) = source.dimensions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let category = op.category();
    let (image, masks) = match op {
        ForgeOp::Real => (source.clone(), MaskPair::empty(w, h)),
        ForgeOp::Inpaint | ForgeOp::Blend => {
            let (generated, region) = match inpainted {
                Some(p) => {
                    check_dims("inpainted image", (w, h), p.image.dimensions())?;
                    check_dims("inpaint mask", (w, h), p.mask.dimensions())?;
                    (p.image.clone(), p.mask.clone())
                }
                None => {
                    let rect = random_rect(&mut rng, w, h, options);
                    let region = rect_mask(w, h, rect);
                    let stub = synth_inpaint_stub(source, &region, rng.random(), options.stub_epsilon)?;
                    (stub, region)
                }
            };
            let image = if op == ForgeOp::Blend {
                blend_inpaint(source, &generated, &region)?
            } else {
                generated
            };
            let masks = MaskPair::from_labels(w, h, &region, assign_labels(category));
            (image, masks)
        }
        ForgeOp::CopyMove => {
            let rect = random_rect(&mut rng, w, h, options);
            let dst = random_origin(&mut rng, w - rect.width, h - rect.height, options.region_grid);
            copy_move(source, rect, dst)?
        }
        ForgeOp::Splice => {
            let (dw, dh) = donor.dimensions();
            let rect = random_rect(&mut rng, dw.min(w), dh.min(h), options);
            let dst = random_origin(&mut rng, w - rect.width, h - rect.height, options.region_grid);
            splice(source, donor, rect, dst)?
        }
    };
    Ok(ForgedSample {
        image,
        masks,
        category,
    })
}

/// Synthetic "authentic" photograph: smooth color field with soft blobs and
/// mild sensor noise.
pub fn synthetic_authentic(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(50.0..200.0));
    let grad: [[f64; 2]; 3] = std::array::from_fn(|_| {
        [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)]
    });
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.1..0.35),
                std::array::from_fn(|_| rng.random_range(-50.0..50.0)),
            )
        })
        .collect();
    RgbImage::from_fn(width, height, |x, y| {
        let u = x as f64 / width.max(1) as f64;
        let v = y as f64 / height.max(1) as f64;
        let mut px = [0u8; 3];
        for c in 0..3 {
            let mut val = base[c] + grad[c][0] * (u - 0.5) + grad[c][1] * (v - 0.5);
            for (bx, by, r, amp) in &blobs {
                let d2 = ((u - bx).powi(2) + (v - by).powi(2)) / (r * r);
                val += amp[c] * (-d2).exp();
            }
            val += rng.random_range(-1.5..1.5);
            px[c] = val.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Fully synthetic forged corpus: `plan` lists how many samples of each op
/// to produce, in order.
///
/// Sources and donors come from [`synthetic_authentic`]; every output image
/// is format-aligned with a JPEG round trip at `options.jpeg_quality`.
/// Sample `i` depends only on `(options.seed, i)`.
pub fn synthetic_corpus(plan: &[(ForgeOp, usize)], size: (u32, u32), options: &ForgeOptions) -> Result<Vec<ForgedSample>> {
    let ops: Vec<ForgeOp> = plan.iter().flat_map(|&(op, n)| std::iter::repeat_n(op, n)).collect();
    let (w, h) = size;
    ops.iter()
        .enumerate()
        .map(|(i, &op)| {
            let seed = crate::datapipe::mix(options.seed, i as u64);
            let source = synthetic_authentic(w, h, seed);
            let donor = synthetic_authentic(w, h, seed ^ 0xD0_D0);
            let mut sample = forge_one(op, &source, &donor, None, seed.rotate_left(17), options)?;
            sample.image = jpeg_roundtrip(&sample.image, options.jpeg_quality)?;
            Ok(sample)
        })
        .collect()
}
