//! Image preprocessing: bilinear resize, unit scaling, channel replication and
//! per-channel standardization with statistics fit on training images only.
//!
//! The model-facing pipeline order is fixed:
//! resize → scale to [0, 1] → replicate grayscale to 3 channels →
//! (training-only augmentation) → standardize.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{read_json, write_json, Error, Result};
use crate::split::SplitTag;

pub const DEFAULT_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colorspace {
    Gray,
    Rgb,
}

/// H×W×C image stored row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let data = img.to_rgb8().into_raw().into_iter().map(f64::from).collect();
            Self {
                height: h,
                width: w,
                channels: 3,
                data,
            }
        } else {
            let data = img.to_luma8().into_raw().into_iter().map(f64::from).collect();
            Self {
                height: h,
                width: w,
                channels: 1,
                data,
            }
        }
    }

    /// Decodes an image file into raw `[0, 255]` values.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(&img))
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

    pub fn colorspace(&self) -> Colorspace {
        if self.channels == 3 {
            Colorspace::Rgb
        } else {
            Colorspace::Gray
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    /// Planar (C×H×W) copy, the layout convolution runtimes expect.
    pub fn to_chw_f32(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0f32; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v as f32;
            }
        }
        out
    }

    /// Rounds `[0, 255]` values to an 8-bit RGB image (grayscale is replicated).
    pub fn to_rgb8(&self) -> image::RgbImage {
        let to_u8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if self.channels == 3 {
                image::Rgb([
                    to_u8(self.get(y, x, 0)),
                    to_u8(self.get(y, x, 1)),
                    to_u8(self.get(y, x, 2)),
                ])
            } else {
                let v = to_u8(self.get(y, x, 0));
                image::Rgb([v, v, v])
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    /// Grayscale inputs are copied into three identical planes.
    #[default]
    Replicate,
    /// Inputs must already have three channels.
    Keep,
}

/// Named, seeded training-time transforms. None are applied by default;
/// horizontal flips in particular change the meaning of one-handed signs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    HorizontalFlip { probability: f64 },
    /// Adds a uniform offset in `[-max_delta, max_delta]`, clamped to `[0, 1]`.
    Brightness { max_delta: f64 },
}

impl Augmentation {
    fn validate(&self) -> Result<()> {
        match *self {
            Augmentation::HorizontalFlip { probability } if !(0.0..=1.0).contains(&probability) => {
                Err(Error::InvalidArgument(format!(
                    "flip probability {probability} outside [0, 1]"
                )))
            }
            Augmentation::Brightness { max_delta } if !(0.0..=1.0).contains(&max_delta) => Err(
                Error::InvalidArgument(format!("brightness delta {max_delta} outside [0, 1]")),
            ),
            _ => Ok(()),
        }
    }

    /// Applies the transform to a unit-scaled image.
    pub fn apply<R: Rng + ?Sized>(&self, img: ImageTensor, rng: &mut R) -> ImageTensor {
        match *self {
            Augmentation::HorizontalFlip { probability } => {
                if rng.random::<f64>() >= probability {
                    return img;
                }
                let (h, w, c) = (img.height, img.width, img.channels);
                let mut data = Vec::with_capacity(img.data.len());
                for y in 0..h {
                    for x in (0..w).rev() {
                        let base = (y * w + x) * c;
                        data.extend_from_slice(&img.data[base..base + c]);
                    }
                }
                ImageTensor { data, ..img }
            }
            Augmentation::Brightness { max_delta } => {
                let delta = rng.random_range(-max_delta..=max_delta);
                img.map(|v| (v + delta).clamp(0.0, 1.0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default = "default_size")]
    pub target_height: usize,
    #[serde(default = "default_size")]
    pub target_width: usize,
    #[serde(default)]
    pub channel_policy: ChannelPolicy,
    #[serde(default)]
    pub augmentation: Vec<Augmentation>,
}

fn default_size() -> usize {
    DEFAULT_SIZE
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_height: DEFAULT_SIZE,
            target_width: DEFAULT_SIZE,
            channel_policy: ChannelPolicy::Replicate,
            augmentation: Vec::new(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(Error::InvalidArgument("target size must be at least 1x1".into()));
        }
        self.augmentation.iter().try_for_each(Augmentation::validate)
    }
}

/// Bilinear resize with half-pixel centers and no anti-aliasing.
///
/// Each output value is `a + (b - a) * t` along x then y, so constant images
/// stay exactly constant and every output lies within the input's range.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidImage("cannot resize an empty image".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, img.height);
    let xs = axis(out_w, img.width);
    let c = img.channels;
    let mut data = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let p00 = img.get(y0, x0, ch);
                let p01 = img.get(y0, x1, ch);
                let p10 = img.get(y1, x0, ch);
                let p11 = img.get(y1, x1, ch);
                let top = p00 + (p01 - p00) * tx;
                let bottom = p10 + (p11 - p10) * tx;
                data[(oy * out_w + ox) * c + ch] = top + (bottom - top) * ty;
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, data)
}

pub fn resize(img: &ImageTensor, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    resize_bilinear(img, cfg.target_height, cfg.target_width)
}

pub fn scale_unit(img: &ImageTensor) -> Result<ImageTensor> {
    if let Some(&value) = img.data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::InvalidPixelRange { value });
    }
    Ok(img.clone().map(|v| v / 255.0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Replicated {
    Done(ImageTensor),
    /// The input already had three channels and is returned unchanged.
    NoOp(ImageTensor),
}

impl Replicated {
    pub fn into_inner(self) -> ImageTensor {
        match self {
            Replicated::Done(t) | Replicated::NoOp(t) => t,
        }
    }
}

pub fn channel_replicate(img: ImageTensor) -> Replicated {
    if img.channels == 3 {
        warn!("channel_replicate called on a 3-channel image; returned unchanged");
        return Replicated::NoOp(img);
    }
    let data = img.data.iter().flat_map(|&v| [v, v, v]).collect();
    Replicated::Done(ImageTensor {
        channels: 3,
        data,
        ..img
    })
}

/// Per-channel mean and population standard deviation over every pixel of
/// every training image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub source_split: SplitTag,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<()> {
        if self.source_split != SplitTag::Train {
            return Err(Error::StatsNotFromTrain(self.source_split.to_string()));
        }
        if let Some(channel) = self.std.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::DegenerateStats { channel });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stats: Self = read_json(path)?;
        stats.validate()?;
        Ok(stats)
    }
}

/// Mergeable running sums for [`fit_stats`]; partial accumulators built in
/// parallel combine associatively.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StatsAccumulator {
    images: usize,
    pixels: u64,
    sum: [f64; 3],
    sum_sq: [f64; 3],
}

impl StatsAccumulator {
    pub fn add(&mut self, img: &ImageTensor) -> Result<()> {
        if img.channels != 3 {
            return Err(Error::Shape(format!(
                "statistics need 3-channel images, got {}",
                img.channels
            )));
        }
        for px in img.data.chunks_exact(3) {
            for c in 0..3 {
                self.sum[c] += px[c];
                self.sum_sq[c] += px[c] * px[c];
            }
        }
        self.images += 1;
        self.pixels += (img.height * img.width) as u64;
        Ok(())
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.images += other.images;
        self.pixels += other.pixels;
        for c in 0..3 {
            self.sum[c] += other.sum[c];
            self.sum_sq[c] += other.sum_sq[c];
        }
        self
    }

    pub fn finish(&self) -> Result<NormalizationStats> {
        if self.pixels == 0 {
            return Err(Error::InvalidArgument("cannot fit statistics on an empty stream".into()));
        }
        let n = self.pixels as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = self.sum[c] / n;
            let var = (self.sum_sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt();
            if std[c] <= 1e-12 {
                return Err(Error::DegenerateStats { channel: c });
            }
        }
        Ok(NormalizationStats {
            mean,
            std,
            source_split: SplitTag::Train,
            sample_count: self.images,
            config_hash: None,
        })
    }
}

/// Fits statistics on a stream of unit-scaled, resized 3-channel training images.
pub fn fit_stats<I: IntoIterator<Item = ImageTensor>>(train: I) -> Result<NormalizationStats> {
    let mut acc = StatsAccumulator::default();
    for img in train {
        acc.add(&img)?;
    }
    acc.finish()
}

pub fn standardize(img: &ImageTensor, stats: &NormalizationStats) -> Result<ImageTensor> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "standardize expects 3 channels, got {}",
            img.channels
        )));
    }
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - stats.mean[c]) / stats.std[c];
        }
    }
    Ok(out)
}

/// The configured pipeline, optionally bound to fitted statistics.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    cfg: PreprocessConfig,
    stats: Option<NormalizationStats>,
}

impl Preprocessor {
    pub fn new(cfg: PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, stats: None })
    }

    pub fn with_stats(mut self, stats: NormalizationStats) -> Result<Self> {
        stats.validate()?;
        self.stats = Some(stats);
        Ok(self)
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.cfg
    }

    pub fn stats(&self) -> Option<&NormalizationStats> {
        self.stats.as_ref()
    }

    /// resize → scale → replicate: a 3-channel image in `[0, 1]`.
    pub fn unit(&self, raw: &ImageTensor) -> Result<ImageTensor> {
        let img = scale_unit(&resize(raw, &self.cfg)?)?;
        match (img.channels, self.cfg.channel_policy) {
            (3, _) => Ok(img),
            (1, ChannelPolicy::Replicate) => Ok(channel_replicate(img).into_inner()),
            (c, ChannelPolicy::Keep) => Err(Error::InvalidImage(format!(
                "channel policy `keep` requires 3-channel input, got {c}"
            ))),
            (c, _) => Err(Error::InvalidImage(format!("unsupported channel count {c}"))),
        }
    }

    pub fn standardized(&self, unit: &ImageTensor) -> Result<ImageTensor> {
        let stats = self.stats.as_ref().ok_or_else(|| {
            Error::InvalidArgument("preprocessor has no normalization statistics".into())
        })?;
        standardize(unit, stats)
    }

    /// Full evaluation-time pipeline.
    pub fn prepare(&self, raw: &ImageTensor) -> Result<ImageTensor> {
        self.standardized(&self.unit(raw)?)
    }

    /// Training-time pipeline: the configured augmentations run on the
    /// unit-scaled image before standardization.
    pub fn prepare_augmented<R: Rng + ?Sized>(
        &self,
        raw: &ImageTensor,
        rng: &mut R,
    ) -> Result<ImageTensor> {
        let mut img = self.unit(raw)?;
        for aug in &self.cfg.augmentation {
            img = aug.apply(img, rng);
        }
        self.standardized(&img)
    }

    /// Fits statistics over image files. Images are decoded in parallel but
    /// merged in path order, so the result is bit-for-bit reproducible.
    pub fn fit_stats_on_files(&self, paths: &[PathBuf]) -> Result<NormalizationStats> {
        let parts = paths
            .par_iter()
            .map(|p| -> Result<StatsAccumulator> {
                let mut acc = StatsAccumulator::default();
                acc.add(&self.unit(&ImageTensor::load(p)?)?)?;
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        parts
            .into_iter()
            .fold(StatsAccumulator::default(), StatsAccumulator::merge)
            .finish()
    }
}
