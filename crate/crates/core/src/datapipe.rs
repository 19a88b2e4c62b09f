//! Manifest-driven dataset access, epoch subsampling, cropping and
//! label-preserving augmentation.
//!
//! Manifests are UTF-8 text with one record per line and tab-separated
//! fields:
//!
//! ```text
//! image  mask_mani  mask_ai  cls  category  split  [source]
//! ```
//!
//! Paths are relative to the manifest's directory; `-` marks an absent mask,
//! which reads as all-zero. Blank lines and lines starting with `#` are
//! ignored. The optional seventh field names the generator or dataset the
//! sample came from and defaults to the category name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{GrayImage, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::{self, assign_labels, SourceCategory};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mask_mani_path: Option<PathBuf>,
    pub mask_ai_path: Option<PathBuf>,
    pub cls_label: u8,
    pub category: SourceCategory,
    pub split: Split,
    pub source: Option<String>,
}

impl SampleRecord {
    /// Generator or dataset name used for per-source reporting.
    pub fn source_name(&self) -> &str {
        self.source.as_deref().unwrap_or(self.category.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

fn opt_path(field: &str) -> Option<PathBuf> {
    (field != "-").then(|| PathBuf::from(field))
}

fn path_field(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "-".to_string(), |p| p.to_string_lossy().into_owned())
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<SampleRecord>) -> Self {
        Self {
            root: root.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parses manifest text. `origin` is only used in error messages.
    pub fn parse(text: &str, root: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |message: String| Error::Manifest {
                path: origin.to_path_buf(),
                line: line_no,
                message,
            };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(6..=7).contains(&fields.len()) {
                return Err(bad(format!("expected 6 or 7 tab-separated fields, found {}", fields.len())));
            }
            let cls_label: u8 = match fields[3] {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("cls label must be 0 or 1, got `{other}`"))),
            };
            let category: SourceCategory = fields[4].parse().map_err(|e: Error| bad(e.to_string()))?;
            let split: Split = fields[5].parse().map_err(|e: Error| bad(e.to_string()))?;
            let expected = assign_labels(category).cls;
            if cls_label != expected {
                return Err(bad(format!(
                    "cls label {cls_label} disagrees with category {category} (expected {expected})"
                )));
            }
            if fields[0].is_empty() || fields[0] == "-" {
                return Err(bad("missing image path".into()));
            }
            records.push(SampleRecord {
                image_path: PathBuf::from(fields[0]),
                mask_mani_path: opt_path(fields[1]),
                mask_ai_path: opt_path(fields[2]),
                cls_label,
                category,
                split,
                source: fields.get(6).filter(|s| !s.is_empty()).map(|s| s.to_string()),
            });
        }
        Ok(Self::new(root, records))
    }

    /// Loads and validates a manifest file; every referenced file must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root, path)?;
        manifest.check_files(path)?;
        Ok(manifest)
    }

    fn check_files(&self, origin: &Path) -> Result<()> {
        // Line numbers in errors count non-comment records from 1.
        for (i, r) in self.records.iter().enumerate() {
            let paths = [Some(&r.image_path), r.mask_mani_path.as_ref(), r.mask_ai_path.as_ref()];
            for p in paths.into_iter().flatten() {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::Manifest {
                        path: origin.to_path_buf(),
                        line: i + 1,
                        message: format!("referenced file {} does not exist", full.display()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.image_path.to_string_lossy(),
                path_field(&r.mask_mani_path),
                path_field(&r.mask_ai_path),
                r.cls_label,
                r.category,
                r.split.as_str()
            );
            if let Some(s) = &r.source {
                let _ = write!(out, "\t{s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.split).or_insert(0) += 1;
        }
        counts
    }

    pub fn category_counts(&self) -> BTreeMap<SourceCategory, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.category).or_insert(0) += 1;
        }
        counts
    }

    pub fn filter(&self, keep: impl Fn(&SampleRecord) -> bool) -> Manifest {
        Manifest::new(
            self.root.clone(),
            self.records.iter().filter(|r| keep(r)).cloned().collect(),
        )
    }

    pub fn split(&self, split: Split) -> Manifest {
        self.filter(|r| r.split == split)
    }

    /// Moves a seeded `fraction` of each category's training records to the
    /// validation split when the manifest has no validation records.
    ///
    /// Categories with a single record are left untouched; otherwise at least
    /// one record is held out.
    pub fn with_validation_holdout(&self, fraction: f64, seed: u64) -> Manifest {
        self.with_holdout(Split::Val, fraction, seed)
    }

    /// Moves a seeded `fraction` of each category's training records to
    /// `target`, unless some record is already in `target`.
    pub fn with_holdout(&self, target: Split, fraction: f64, seed: u64) -> Manifest {
        if self.records.iter().any(|r| r.split == target) || fraction <= 0.0 {
            return self.clone();
        }
        let mut out = self.clone();
        let stream = match target {
            Split::Val => 0x7661_6c00,
            Split::Test => 0x7465_7374,
            Split::Train => 0x7472_6169,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, stream));
        for category in SourceCategory::ALL {
            let mut idx: Vec<usize> = out
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.category == category && r.split == Split::Train)
                .map(|(i, _)| i)
                .collect();
            if idx.len() < 2 {
                continue;
            }
            let take = ((idx.len() as f64 * fraction).ceil() as usize).clamp(1, idx.len() - 1);
            idx.shuffle(&mut rng);
            for &i in &idx[..take] {
                out.records[i].split = target;
            }
        }
        out
    }

    /// Loads record `index` with its masks (absent masks read as zeros).
    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let r = &self.records[index];
        let image = image::open(self.root.join(&r.image_path))?.to_rgb8();
        let (w, h) = image.dimensions();
        let load_mask = |p: &Option<PathBuf>, what: &str| -> Result<GrayImage> {
            match p {
                None => Ok(GrayImage::new(w, h)),
                Some(p) => {
                    let m = image::open(self.root.join(p))?.to_luma8();
                    if m.dimensions() != (w, h) {
                        return Err(Error::Dimension(format!(
                            "{what} {} is {:?}, image is {:?}",
                            p.display(),
                            m.dimensions(),
                            (w, h)
                        )));
                    }
                    Ok(binarize(&m))
                }
            }
        };
        Ok(Sample {
            mask_mani: load_mask(&r.mask_mani_path, "mask_mani")?,
            mask_ai: load_mask(&r.mask_ai_path, "mask_ai")?,
            image,
            cls: r.cls_label,
            category: r.category,
        })
    }
}

fn binarize(m: &GrayImage) -> GrayImage {
    GrayImage::from_fn(m.width(), m.height(), |x, y| {
        image::Luma([if m.get_pixel(x, y)[0] >= 128 { forge::MASK_ON } else { 0 }])
    })
}

/// SplitMix64-style combination of a seed with a stream index.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of records an epoch of `fraction` draws from `n`.
pub fn subsample_size(n: usize, fraction: f64) -> usize {
    // The epsilon keeps products like 0.1 * 1000 from rounding up to 101.
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Draws `⌈fraction·N⌉` records without replacement for one epoch.
///
/// The draw depends on `(seed, epoch)` only, so epochs are independent of
/// each other and reproducible.
pub fn epoch_subsample(manifest: &Manifest, fraction: f64, seed: u64, epoch: u64) -> Result<Manifest> {
    if manifest.is_empty() {
        return Err(Error::Empty("cannot subsample an empty manifest".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("epoch fraction {fraction} outside (0, 1]")));
    }
    let k = subsample_size(manifest.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch));
    let picked = rand::seq::index::sample(&mut rng, manifest.len(), k);
    Ok(Manifest::new(
        manifest.root.clone(),
        picked.iter().map(|i| manifest.records[i].clone()).collect(),
    ))
}

/// An image with its two `{0, 255}` masks and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask_mani: GrayImage,
    pub mask_ai: GrayImage,
    pub cls: u8,
    pub category: SourceCategory,
}

impl Sample {
    pub fn dimensions(&self) -> (u32, u32) {
        self.image.dimensions()
    }

    fn map_masks(&self, image: RgbImage, f: impl Fn(&GrayImage) -> GrayImage) -> Sample {
        Sample {
            image,
            mask_mani: f(&self.mask_mani),
            mask_ai: f(&self.mask_ai),
            cls: self.cls,
            category: self.category,
        }
    }
}

fn pad_image<P: image::Pixel>(img: &image::ImageBuffer<P, Vec<P::Subpixel>>, pad: u32) -> image::ImageBuffer<P, Vec<P::Subpixel>>
where
    P::Subpixel: Default,
{
    let (w, h) = img.dimensions();
    let mut out = image::ImageBuffer::new(w + 2 * pad, h + 2 * pad);
    imageops::replace(&mut out, img, pad as i64, pad as i64);
    out
}

fn window<P: image::Pixel + 'static>(
    img: &image::ImageBuffer<P, Vec<P::Subpixel>>,
    x: u32,
    y: u32,
    size: u32,
) -> image::ImageBuffer<P, Vec<P::Subpixel>> {
    imageops::crop_imm(img, x, y, size, size).to_image()
}

/// Resizes so the shorter side equals `size` (aspect preserved, longer side
/// rounded up): bilinear for the image, nearest for the masks.
pub fn resize_shorter_side(sample: &Sample, size: u32) -> Sample {
    let (w, h) = sample.dimensions();
    let (nw, nh) = if w <= h {
        (size, (h as u64 * size as u64).div_ceil(w as u64) as u32)
    } else {
        ((w as u64 * size as u64).div_ceil(h as u64) as u32, size)
    };
    let image = imageops::resize(&sample.image, nw, nh, FilterType::Triangle);
    sample.map_masks(image, |m| imageops::resize(m, nw, nh, FilterType::Nearest))
}

fn crop_at(sample: &Sample, pad: u32, x: u32, y: u32, size: u32) -> Sample {
    let image = window(&pad_image(&sample.image, pad), x, y, size);
    sample.map_masks(image, |m| window(&pad_image(m, pad), x, y, size))
}

/// Crop window origin (in padded coordinates) chosen by [`random_crop`].
pub fn random_crop_origin(width: u32, height: u32, size: u32, pad: u32, rng: &mut impl Rng) -> (u32, u32) {
    let x = rng.random_range(0..=width + 2 * pad - size);
    let y = rng.random_range(0..=height + 2 * pad - size);
    (x, y)
}

/// Zero-pads every border by `pad` and cuts a random `size`×`size` window,
/// identically for the image and both masks.
///
/// Images whose padded extent is still smaller than `size` are first resized
/// so their shorter side equals `size`.
pub fn random_crop(sample: &Sample, size: u32, pad: u32, rng: &mut impl Rng) -> Sample {
    let (w, h) = sample.dimensions();
    let resized;
    let sample = if w.min(h) + 2 * pad < size {
        resized = resize_shorter_side(sample, size);
        &resized
    } else {
        sample
    };
    let (w, h) = sample.dimensions();
    let (x, y) = random_crop_origin(w, h, size, pad, rng);
    crop_at(sample, pad, x, y, size)
}

/// Resizes images with a side below `size`, then pads by `pad` and cuts the
/// central `size`×`size` window.
pub fn center_crop(sample: &Sample, size: u32, pad: u32) -> Sample {
    let (w, h) = sample.dimensions();
    let resized;
    let sample = if w.min(h) < size {
        resized = resize_shorter_side(sample, size);
        &resized
    } else {
        sample
    };
    let (w, h) = sample.dimensions();
    let x = (w + 2 * pad - size) / 2;
    let y = (h + 2 * pad - size) / 2;
    crop_at(sample, pad, x, y, size)
}

/// Per-family probabilities and ranges of the training augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub jitter_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `1 ± jitter_strength`.
    pub jitter_strength: f64,
    pub flip_prob: f64,
    pub jpeg_prob: f64,
    pub jpeg_quality: (u8, u8),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            blur_prob: 0.5,
            blur_sigma: (0.0, 2.0),
            jitter_prob: 0.3,
            jitter_strength: 0.2,
            flip_prob: 0.5,
            jpeg_prob: 0.3,
            jpeg_quality: (60, 100),
        }
    }
}

impl AugmentPolicy {
    /// Augmentation families, in application order.
    pub const FAMILIES: [&'static str; 4] = ["blur", "color_jitter", "flip", "jpeg"];

    pub fn disabled() -> Self {
        Self {
            blur_prob: 0.0,
            jitter_prob: 0.0,
            flip_prob: 0.0,
            jpeg_prob: 0.0,
            ..Self::default()
        }
    }
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    sample.map_masks(imageops::flip_horizontal(&sample.image), imageops::flip_horizontal)
}

pub fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return image.clone();
    }
    imageops::blur(image, sigma as f32)
}

/// Brightness, contrast and saturation scaling.
pub fn color_jitter(image: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let n = (image.width() * image.height()).max(1) as f64;
    let mean_luma = image.pixels().map(luma).sum::<f64>() / n;
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let p = image.get_pixel(x, y);
        let l = luma(p);
        let mut o = [0u8; 3];
        for c in 0..3 {
            let mut v = p[c] as f64 * brightness;
            let lb = l * brightness;
            v = lb + (v - lb) * saturation;
            v = mean_luma * brightness + (v - mean_luma * brightness) * contrast;
            o[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(o)
    })
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Applies the policy. Flip moves image and masks together; blur, jitter and
/// JPEG touch the image only. Labels never change.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Sample> {
    let mut out = sample.clone();
    if rng.random_bool(policy.blur_prob) {
        let sigma = rng.random_range(policy.blur_sigma.0..=policy.blur_sigma.1);
        out.image = gaussian_blur(&out.image, sigma);
    }
    if rng.random_bool(policy.jitter_prob) {
        let s = policy.jitter_strength;
        let mut factor = || rng.random_range(1.0 - s..=1.0 + s);
        let (b, c, sat) = (factor(), factor(), factor());
        out.image = color_jitter(&out.image, b, c, sat);
    }
    if rng.random_bool(policy.flip_prob) {
        out = flip_horizontal(&out);
    }
    if rng.random_bool(policy.jpeg_prob) {
        let q = rng.random_range(policy.jpeg_quality.0..=policy.jpeg_quality.1);
        out.image = forge::jpeg_roundtrip(&out.image, q)?;
    }
    Ok(out)
}

/// Cropping and augmentation settings of the loaders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub crop_size: u32,
    pub pad: u32,
    pub val_fraction: f64,
    pub augment: AugmentPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            crop_size: 512,
            pad: 1,
            val_fraction: 0.05,
            augment: AugmentPolicy::default(),
        }
    }
}

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Normalized `[3, H, W]` input tensor.
pub fn image_tensor(image: &RgbImage) -> Tensor {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in image.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = (p[c] as f64 / 255.0 - MEAN[c]) / STD[c];
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// `{0, 1}` target of length `H·W`.
pub fn mask_tensor(mask: &GrayImage) -> Tensor {
    let data = mask.pixels().map(|p| if p[0] != 0 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![(mask.width() * mask.height()) as usize], data)
}

/// A sample ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub image: Tensor,
    pub mask_ai: Tensor,
    pub mask_mani: Tensor,
    pub cls: u8,
    pub category: SourceCategory,
}

impl Prepared {
    pub fn from_sample(sample: &Sample) -> Self {
        Self {
            image: image_tensor(&sample.image),
            mask_ai: mask_tensor(&sample.mask_ai),
            mask_mani: mask_tensor(&sample.mask_mani),
            cls: sample.cls,
            category: sample.category,
        }
    }
}

/// Loads, crops and (for training) augments records of `manifest`.
///
/// Each record's randomness comes from `mix(seed, position)`, so the output
/// is identical for any worker count.
pub fn prepare(
    manifest: &Manifest,
    config: &DataConfig,
    train: bool,
    seed: u64,
    workers: usize,
) -> Result<Vec<Prepared>> {
    let work = |i: usize| -> Result<Prepared> {
        let sample = manifest.load_sample(i)?;
        let sample = if train {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            let cropped = random_crop(&sample, config.crop_size, config.pad, &mut rng);
            augment(&cropped, &config.augment, &mut rng)?
        } else {
            center_crop(&sample, config.crop_size, config.pad)
        };
        Ok(Prepared::from_sample(&sample))
    };
    crate::parallel::map_indexed(workers, manifest.len(), work)
}

/// How [`write_corpus`] stores images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageEncoding {
    /// Lossless; for pixels that are already format-aligned.
    Png,
    /// JPEG at the given quality.
    Jpeg(u8),
}

/// Writes forged samples under `dir` (`images/`, `masks/`) and returns the
/// manifest describing them. Empty masks are recorded as absent.
///
/// The manifest is not saved; its root is `dir`.
pub fn write_corpus(
    dir: &Path,
    samples: &[forge::ForgedSample],
    encoding: ImageEncoding,
    split: Split,
    source: Option<&str>,
) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:05}_{}", s.category);
        let image_path = match encoding {
            ImageEncoding::Png => {
                let p = PathBuf::from("images").join(format!("{stem}.png"));
                s.image.save(dir.join(&p))?;
                p
            }
            ImageEncoding::Jpeg(q) => {
                let p = PathBuf::from("images").join(format!("{stem}.jpg"));
                fs::write(dir.join(&p), forge::jpeg_encode_rgb(&s.image, q)?)?;
                p
            }
        };
        let write_mask = |m: &GrayImage, kind: &str| -> Result<Option<PathBuf>> {
            if m.pixels().all(|p| p[0] == 0) {
                return Ok(None);
            }
            let p = PathBuf::from("masks").join(format!("{stem}_{kind}.png"));
            m.save(dir.join(&p))?;
            Ok(Some(p))
        };
        records.push(SampleRecord {
            image_path,
            mask_mani_path: write_mask(&s.masks.mani, "mani")?,
            mask_ai_path: write_mask(&s.masks.ai, "ai")?,
            cls_label: s.labels().cls,
            category: s.category,
            split,
            source: source.map(str::to_string),
        });
    }
    Ok(Manifest::new(dir, records))
}
