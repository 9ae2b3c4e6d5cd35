//! Monte-Carlo sampling sets: image augmentations, point prompts, model
//! sizes and the enumeration of the full configuration grid.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Number of mask proposals per forward pass.
pub const NUM_HEADS: usize = 3;

/// An 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("zero dimension {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} bytes for {}x{} RGB, got {}",
                width * height * 3,
                width,
                height,
                data.len()
            )));
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn flip_rows(&self) -> Self {
        let stride = self.width * 3;
        let mut data = Vec::with_capacity(self.data.len());
        for r in (0..self.height).rev() {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Mean absolute per-channel difference, in `[0, 255]`.
    pub fn mean_abs_diff(&self, other: &RgbImage) -> f64 {
        let s: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.abs_diff(b) as u64)
            .sum();
        s as f64 / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Identity,
    #[serde(rename = "vflip")]
    VerticalFlip,
    #[serde(rename = "jpeg_q10")]
    JpegQ10,
    #[serde(rename = "jpeg_q30")]
    JpegQ30,
    #[serde(rename = "blur_k5")]
    GaussianBlurK5,
    #[serde(rename = "noise")]
    GaussianNoise,
}

impl AugKind {
    pub const ALL: [AugKind; 6] = [
        AugKind::Identity,
        AugKind::VerticalFlip,
        AugKind::JpegQ10,
        AugKind::JpegQ30,
        AugKind::GaussianBlurK5,
        AugKind::GaussianNoise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugKind::Identity => "identity",
            AugKind::VerticalFlip => "vflip",
            AugKind::JpegQ10 => "jpeg_q10",
            AugKind::JpegQ30 => "jpeg_q30",
            AugKind::GaussianBlurK5 => "blur_k5",
            AugKind::GaussianNoise => "noise",
        }
    }

    /// Whether the augmentation moves pixels (and so must be undone on masks).
    pub fn is_geometric(self) -> bool {
        matches!(self, AugKind::VerticalFlip)
    }

    pub fn index(self) -> usize {
        AugKind::ALL.iter().position(|&a| a == self).unwrap()
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        AugKind::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown augmentation {s:?}"))
    }
}

/// Numeric parameters of the photometric augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugParams {
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for AugParams {
    fn default() -> Self {
        Self {
            blur_kernel: 5,
            blur_sigma: 1.0,
            // 10% of the 8-bit range
            noise_sigma: 25.5,
        }
    }
}

pub fn apply_augmentation(img: &RgbImage, aug: AugKind, seed: u64) -> Result<RgbImage> {
    apply_augmentation_with(img, aug, &AugParams::default(), seed)
}

pub fn apply_augmentation_with(
    img: &RgbImage,
    aug: AugKind,
    params: &AugParams,
    seed: u64,
) -> Result<RgbImage> {
    match aug {
        AugKind::Identity => Ok(img.clone()),
        AugKind::VerticalFlip => Ok(img.flip_rows()),
        AugKind::JpegQ10 => jpeg_round_trip(img, 10),
        AugKind::JpegQ30 => jpeg_round_trip(img, 30),
        AugKind::GaussianBlurK5 => Ok(gaussian_blur(img, params.blur_kernel, params.blur_sigma)),
        AugKind::GaussianNoise => Ok(gaussian_noise(img, params.noise_sigma, seed)),
    }
}

fn jpeg_round_trip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let w = u32::try_from(img.width).map_err(|_| Error::InvalidImage("width too large".into()))?;
    let h = u32::try_from(img.height).map_err(|_| Error::InvalidImage("height too large".into()))?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(
        &img.data,
        w,
        h,
        ExtendedColorType::Rgb8,
    )?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)?.to_rgb8();
    if decoded.width() != w || decoded.height() != h {
        return Err(Error::InvalidImage("jpeg decode changed the image size".into()));
    }
    RgbImage::new(img.width, img.height, decoded.into_raw())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn gaussian_blur(img: &RgbImage, size: usize, sigma: f64) -> RgbImage {
    let k = gaussian_kernel(size.max(1), sigma);
    let half = (k.len() / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut tmp = vec![0.0f64; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let cc = (c + i as isize - half).clamp(0, w - 1);
                    acc += kv * img.data[((r * w + cc) * 3 + ch) as usize] as f64;
                }
                tmp[((r * w + c) * 3 + ch) as usize] = acc;
            }
        }
    }
    let mut out = vec![0u8; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let rr = (r + i as isize - half).clamp(0, h - 1);
                    acc += kv * tmp[((rr * w + c) * 3 + ch) as usize];
                }
                out[((r * w + c) * 3 + ch) as usize] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage {
        width: img.width,
        height: img.height,
        data: out,
    }
}

fn gaussian_noise(img: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let data = img
        .data
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// A set of foreground point prompts, `(row, col)` in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub points: Vec<(usize, usize)>,
}

impl PointPrompt {
    pub fn single(row: usize, col: usize) -> Self {
        Self {
            points: vec![(row, col)],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidImage("prompt has no points".into()));
        }
        if let Some(&(r, c)) = self.points.iter().find(|&&(r, c)| r >= height || c >= width) {
            return Err(Error::InvalidImage(format!(
                "prompt point ({r},{c}) outside {width}x{height}"
            )));
        }
        Ok(())
    }

    /// The same prompt on a vertically flipped image.
    pub fn flip_rows(&self, height: usize) -> Self {
        Self {
            points: self.points.iter().map(|&(r, c)| (height - 1 - r, c)).collect(),
        }
    }
}

/// Foreground pixel nearest to the foreground centroid; ties go to the
/// smallest `(row, col)`.
pub fn centroid_prompt(gt: &BinaryMask) -> Result<PointPrompt> {
    let fg = gt.foreground();
    if fg.is_empty() {
        return Err(Error::EmptyMask("centroid of an empty mask"));
    }
    // Exact integer arithmetic: distances scaled by n^2.
    let n = fg.len() as i128;
    let sr: i128 = fg.iter().map(|&(r, _)| r as i128).sum();
    let sc: i128 = fg.iter().map(|&(_, c)| c as i128).sum();
    let mut best = fg[0];
    let mut best_d = i128::MAX;
    for &(r, c) in &fg {
        let dr = n * r as i128 - sr;
        let dc = n * c as i128 - sc;
        let d = dr * dr + dc * dc;
        if d < best_d {
            best_d = d;
            best = (r, c);
        }
    }
    Ok(PointPrompt::single(best.0, best.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSampling {
    /// Deterministic farthest-point sampling seeded at the centroid.
    #[default]
    FarthestPoint,
    /// `k` distinct foreground pixels drawn uniformly with the given seed.
    Uniform,
}

pub fn sample_prompt_points(gt: &BinaryMask, k: usize, seed: u64) -> Result<PointPrompt> {
    sample_prompt_points_with(gt, k, seed, PromptSampling::FarthestPoint)
}

pub fn sample_prompt_points_with(
    gt: &BinaryMask,
    k: usize,
    seed: u64,
    mode: PromptSampling,
) -> Result<PointPrompt> {
    let fg = gt.foreground();
    if k == 0 || fg.len() < k {
        return Err(Error::NotEnoughForeground {
            requested: k,
            available: fg.len(),
        });
    }
    match mode {
        PromptSampling::FarthestPoint => {
            let first = centroid_prompt(gt)?.points[0];
            let mut points = vec![first];
            let d2 = |a: (usize, usize), b: (usize, usize)| {
                let dr = a.0 as i64 - b.0 as i64;
                let dc = a.1 as i64 - b.1 as i64;
                dr * dr + dc * dc
            };
            let mut min_d: Vec<i64> = fg.iter().map(|&p| d2(p, first)).collect();
            while points.len() < k {
                // fg is row-major, so strict `>` keeps the lexicographic minimum on ties
                let mut best = 0;
                for i in 1..fg.len() {
                    if min_d[i] > min_d[best] {
                        best = i;
                    }
                }
                let p = fg[best];
                points.push(p);
                for (m, &q) in min_d.iter_mut().zip(&fg) {
                    *m = (*m).min(d2(p, q));
                }
            }
            Ok(PointPrompt { points })
        }
        PromptSampling::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = index::sample(&mut rng, fg.len(), k).into_vec();
            idx.sort_unstable();
            Ok(PointPrompt {
                points: idx.into_iter().map(|i| fg[i]).collect(),
            })
        }
    }
}

/// The four model sizes, ordered from largest to smallest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelId {
    #[serde(rename = "large")]
    L,
    #[serde(rename = "base_plus")]
    BPlus,
    #[serde(rename = "small")]
    S,
    #[serde(rename = "tiny")]
    T,
}

impl ModelId {
    pub const ALL: [ModelId; 4] = [ModelId::L, ModelId::BPlus, ModelId::S, ModelId::T];

    pub fn index(self) -> usize {
        match self {
            ModelId::L => 0,
            ModelId::BPlus => 1,
            ModelId::S => 2,
            ModelId::T => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::L => "large",
            ModelId::BPlus => "base_plus",
            ModelId::S => "small",
            ModelId::T => "tiny",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            ModelId::L => "L",
            ModelId::BPlus => "B+",
            ModelId::S => "S",
            ModelId::T => "T",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.short().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown model {s:?}"))
    }
}

/// One cell `(t, x_P, θ, â)` of the sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleConfig {
    pub aug: AugKind,
    pub prompt_index: usize,
    pub model: ModelId,
    pub head: usize,
}

impl fmt::Display for SampleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(aug={}, prompt={}, model={}, head={})",
            self.aug, self.prompt_index, self.model, self.head
        )
    }
}

/// Full grid in aug-major, prompt, model, head order.
pub fn enumerate_configs(n_prompts: usize) -> Vec<SampleConfig> {
    enumerate_subgrid(&AugKind::ALL, n_prompts)
}

pub fn enumerate_subgrid(augs: &[AugKind], n_prompts: usize) -> Vec<SampleConfig> {
    let mut out = Vec::with_capacity(augs.len() * n_prompts * ModelId::ALL.len() * NUM_HEADS);
    for &aug in augs {
        for prompt_index in 0..n_prompts {
            for model in ModelId::ALL {
                for head in 0..NUM_HEADS {
                    out.push(SampleConfig {
                        aug,
                        prompt_index,
                        model,
                        head,
                    });
                }
            }
        }
    }
    out
}
