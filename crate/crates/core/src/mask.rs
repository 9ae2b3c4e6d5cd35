//! Binary and probabilistic masks, IoU and the entropy kernels.
//!
//! Entropies are measured in bits. Certain pixels (`p == 0` or `p == 1`)
//! contribute exactly zero; everything else is clamped to `[EPS, 1 - EPS]`
//! before the logarithm is taken.
//!
//! Degenerate conventions:
//! - the weighted entropy of an all-background map is `0`,
//! - the mean entropy over an empty prediction is `0`,
//! - the IoU of two empty masks is `1`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to probabilities before `log2`.
pub const EPS: f64 = 1e-7;

/// Default binarization threshold (strict `>`).
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMask(format!("zero dimension {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::InvalidMask(format!(
                "data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground coordinates as `(row, col)` in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn flip_rows(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for r in (0..self.height).rev() {
            data.extend_from_slice(&self.data[r * self.width..(r + 1) * self.width]);
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn same_shape(&self, other: &BinaryMask) -> Result<()> {
        check_shape((self.width, self.height), (other.width, other.height))
    }

    /// Hard 0/1 probability map with the same foreground.
    pub fn to_prob(&self) -> ProbMask {
        ProbMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ProbMask {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMask(format!("zero dimension {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::InvalidMask(format!(
                "data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(i) = data.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidMask(format!(
                "probability {} at index {i} outside [0,1]",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, p: f64) -> Result<Self> {
        Self::new(width, height, vec![p; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn flip_rows(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for r in (0..self.height).rev() {
            data.extend_from_slice(&self.data[r * self.width..(r + 1) * self.width]);
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn same_shape(&self, other: &ProbMask) -> Result<()> {
        check_shape((self.width, self.height), (other.width, other.height))
    }

    pub fn threshold(&self, t: f64) -> BinaryMask {
        threshold(self, t)
    }

    /// Thresholded at [`DEFAULT_THRESHOLD`].
    pub fn to_binary(&self) -> BinaryMask {
        threshold(self, DEFAULT_THRESHOLD)
    }
}

fn check_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            left_w: a.0,
            left_h: a.1,
            right_w: b.0,
            right_h: b.1,
        });
    }
    Ok(())
}

/// Identifies which method produced an uncertainty score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    WeightedEntropy,
    PredictiveEntropy,
    EpistemicEntropy,
    PromptEntropy,
    TaskEntropy,
    MeanMaskEntropy,
    InverseSamScore,
    UsamPredictive,
    DeltaModel,
    DeltaPrompt,
    DeltaTask,
    DirectDeltaModel,
    DirectDeltaPrompt,
    DirectDeltaTask,
    Random,
    Oracle,
    Worst,
}

/// Codomain of a method's scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreRange {
    Unit,
    Signed,
    Unbounded,
}

impl Method {
    pub fn range(self) -> ScoreRange {
        use Method::*;
        match self {
            WeightedEntropy | PredictiveEntropy | EpistemicEntropy | PromptEntropy
            | TaskEntropy | MeanMaskEntropy | InverseSamScore | UsamPredictive | Random => {
                ScoreRange::Unit
            }
            DeltaModel | DeltaPrompt | DeltaTask | DirectDeltaModel | DirectDeltaPrompt
            | DirectDeltaTask | Oracle | Worst => ScoreRange::Signed,
        }
    }

    /// Short column name used in CSV output.
    pub fn name(self) -> &'static str {
        use Method::*;
        match self {
            WeightedEntropy => "H",
            PredictiveEntropy => "H_Y",
            EpistemicEntropy => "H_Theta",
            PromptEntropy => "H_XP",
            TaskEntropy => "H_A",
            MeanMaskEntropy => "H_Std",
            InverseSamScore => "inv_SamScore",
            UsamPredictive => "USAM",
            DeltaModel => "Delta_Theta",
            DeltaPrompt => "Delta_XP",
            DeltaTask => "Delta_A",
            DirectDeltaModel => "Delta*_Theta",
            DirectDeltaPrompt => "Delta*_XP",
            DirectDeltaTask => "Delta*_A",
            Random => "random",
            Oracle => "oracle",
            Worst => "worst",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A scalar uncertainty for one whole mask, tagged with its producer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncScore {
    value: f64,
    method: Method,
}

impl UncScore {
    pub fn new(value: f64, method: Method) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Domain {
                what: "uncertainty score must be finite",
                value,
            });
        }
        let ok = match method.range() {
            ScoreRange::Unit => (0.0..=1.0).contains(&value),
            ScoreRange::Signed => (-1.0..=1.0).contains(&value),
            ScoreRange::Unbounded => true,
        };
        if !ok {
            return Err(Error::Domain {
                what: "uncertainty score outside its method's range",
                value,
            });
        }
        Ok(Self { value, method })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub(crate) fn retag(self, method: Method) -> Self {
        Self {
            value: self.value,
            method,
        }
    }
}

/// Binary entropy in bits, `0·log 0 := 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain {
            what: "probability must lie in [0,1]",
            value: p,
        });
    }
    Ok(binary_entropy_unchecked(p))
}

#[inline]
pub(crate) fn binary_entropy_unchecked(p: f64) -> f64 {
    if p == 0.0 || p == 1.0 {
        return 0.0;
    }
    let p = p.clamp(EPS, 1.0 - EPS);
    let q = 1.0 - p;
    -(p * p.log2() + q * q.log2())
}

/// Foreground-weighted mean of per-pixel binary entropies.
pub fn weighted_mask_entropy(y: &ProbMask) -> UncScore {
    let total: f64 = y.data.iter().sum();
    if total == 0.0 {
        return UncScore {
            value: 0.0,
            method: Method::WeightedEntropy,
        };
    }
    let acc: f64 = y
        .data
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * binary_entropy_unchecked(p))
        .sum();
    UncScore {
        // rounding can push a uniform map a few ulps past 1
        value: (acc / total).clamp(0.0, 1.0),
        method: Method::WeightedEntropy,
    }
}

/// Single-precision variant of [`weighted_mask_entropy`] for bulk use.
/// Reference results always come from the `f64` path.
pub fn weighted_mask_entropy_f32(y: &[f32]) -> f32 {
    let total: f32 = y.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let acc: f32 = y
        .iter()
        .filter(|&&p| p > 0.0 && p < 1.0)
        .map(|&p| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            let q = 1.0 - p;
            -p * (p * p.log2() + q * q.log2())
        })
        .sum();
    (acc / total).clamp(0.0, 1.0)
}

/// Mean entropy over the pixels of the predicted mask (`H_Std` baseline).
pub fn mean_mask_entropy(y: &ProbMask, m: &BinaryMask) -> Result<UncScore> {
    check_shape((y.width, y.height), (m.width, m.height))?;
    let mut n = 0usize;
    let mut acc = 0.0;
    for (&p, &fg) in y.data.iter().zip(&m.data) {
        if fg {
            n += 1;
            acc += binary_entropy_unchecked(p);
        }
    }
    let value = if n == 0 { 0.0 } else { acc / n as f64 };
    UncScore::new(value.clamp(0.0, 1.0), Method::MeanMaskEntropy)
}

/// Intersection over union; two empty masks have IoU `1`.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_shape(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground where `y > t`.
pub fn threshold(y: &ProbMask, t: f64) -> BinaryMask {
    BinaryMask {
        width: y.width,
        height: y.height,
        data: y.data.iter().map(|&p| p > t).collect(),
    }
}
