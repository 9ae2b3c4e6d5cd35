//! Promptable segmentation backends.
//!
//! [`SegmentationBackend`] is the only thing the estimators need from a
//! model: three mask proposals, their self-estimated IoUs (SamScores) and a
//! 512-d token per proposal. [`SyntheticSam`] is a deterministic stand-in
//! used to exercise the whole pipeline without model weights.
//!
//! The synthetic scene is a union of 1-3 ellipses (the object), each with a
//! shrunken copy (its part) and a neighbouring distractor ellipse (which
//! together with the object forms the group). Predictions are the object's
//! signed distance field perturbed by a smooth random field whose strength
//! grows with model size, sample hardness and image degradation and shrinks
//! with the number of prompt points. Unprompted components of the object
//! are dropped by weaker models when they are not salient enough.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{iou, BinaryMask, ProbMask};
use crate::sampling::{ModelId, PointPrompt, RgbImage, NUM_HEADS};
use crate::seed;

pub const TOKEN_DIM: usize = 512;
/// Mask-token half of the concatenated token.
pub const MASK_TOKEN: Range<usize> = 0..256;
/// IoU-token half of the concatenated token.
pub const IOU_TOKEN: Range<usize> = 256..512;

/// One forward pass: three proposals with scores and tokens.
///
/// Tokens are per proposal: the proposal's own mask token followed by the
/// shared IoU token.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub masks: [ProbMask; NUM_HEADS],
    pub sam_scores: [f64; NUM_HEADS],
    pub tokens: [Vec<f64>; NUM_HEADS],
}

impl ForwardOutput {
    pub fn validate(&self) -> Result<()> {
        for (h, t) in self.tokens.iter().enumerate() {
            if t.len() != TOKEN_DIM {
                return Err(Error::InvalidSampleSet(format!(
                    "head {h}: token length {} != {TOKEN_DIM}",
                    t.len()
                )));
            }
        }
        if let Some(s) = self.sam_scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Domain {
                what: "SamScore must be finite",
                value: *s,
            });
        }
        Ok(())
    }

    /// Head with the highest SamScore; ties go to the lowest index.
    pub fn selected_head(&self) -> usize {
        argmax_first(&self.sam_scores)
    }
}

pub(crate) fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

pub trait SegmentationBackend {
    fn forward(&self, image: &RgbImage, prompt: &PointPrompt, model: ModelId)
        -> Result<ForwardOutput>;
}

/// Parameters of the synthetic segmentation world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    /// `(height, width)`
    pub image_size: (usize, usize),
    /// Boundary-corruption strength per model, indexed by [`ModelId::index`].
    pub model_noise: [f64; 4],
    /// Relative corruption reduction per additional prompt point.
    pub prompt_gain: f64,
    /// Probability that the three heads target different granularities.
    pub ambiguity: f64,
    /// Standard deviation of the SamScore estimation error.
    pub score_noise: f64,
    /// Standard deviation of the nuisance noise added to tokens.
    pub token_noise: f64,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: (32, 32),
            model_noise: [0.3, 0.45, 0.6, 0.9],
            prompt_gain: 0.08,
            ambiguity: 0.35,
            score_noise: 0.08,
            token_noise: 0.5,
        }
    }
}

/// Corruption strength at which a model drops every non-salient component.
const MISS_REFERENCE: f64 = 1.0;

impl SyntheticWorld {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// No corruption, no ambiguity, exact scores.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            seed,
            model_noise: [0.0; 4],
            ambiguity: 0.0,
            score_noise: 0.0,
            ..Self::default()
        }
    }

    /// Replaces the model noise by `base + spread * rank` (Large has rank 0).
    pub fn with_noise_spread(mut self, base: f64, spread: f64) -> Self {
        for m in ModelId::ALL {
            self.model_noise[m.index()] = base + spread * m.index() as f64;
        }
        self
    }

    pub fn noise(&self, model: ModelId) -> f64 {
        self.model_noise[model.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::InvalidWorld(format!("image size {h}x{w} below 16x16")));
        }
        if self.model_noise.iter().any(|&n| !(n >= 0.0 && n.is_finite())) {
            return Err(Error::InvalidWorld("model noise must be finite and >= 0".into()));
        }
        if !self.model_noise.windows(2).all(|p| p[0] <= p[1]) {
            return Err(Error::InvalidWorld(
                "model noise must be ordered large <= base+ <= small <= tiny".into(),
            ));
        }
        for (name, v) in [
            ("prompt_gain", self.prompt_gain),
            ("score_noise", self.score_noise),
            ("token_noise", self.token_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidWorld(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::InvalidWorld("ambiguity must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    Part,
    Object,
    Group,
}

/// Part / object / group hierarchy of one sample. The object is the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    pub ambiguous: bool,
    pub part: BinaryMask,
    pub object: BinaryMask,
    pub group: BinaryMask,
}

impl TaskFamily {
    pub fn head_targets(&self) -> [Granularity; NUM_HEADS] {
        if self.ambiguous {
            [Granularity::Part, Granularity::Object, Granularity::Group]
        } else {
            [Granularity::Object; NUM_HEADS]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ellipse {
    cr: f64,
    cc: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    /// Approximate signed distance, positive inside.
    fn sd(&self, r: f64, c: f64) -> f64 {
        let (dy, dx) = (r - self.cr, c - self.cc);
        let (s, co) = self.angle.sin_cos();
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        let rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        (1.0 - rho) * (self.a * self.b).sqrt()
    }

    fn shrunk(&self, f: f64) -> Self {
        Self {
            a: self.a * f,
            b: self.b * f,
            ..*self
        }
    }

    fn sd_map(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push(self.sd(r as f64, c as f64));
            }
        }
        out
    }
}

/// A synthetic image with its ground truth and latent scene description.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample_seed: u64,
    pub image: RgbImage,
    pub gt: BinaryMask,
    pub family: TaskFamily,
    height: usize,
    width: usize,
    comp_sd: Vec<Vec<f64>>,
    part_sd: Vec<Vec<f64>>,
    distractor_sd: Vec<f64>,
    /// GT pixel counts keyed by the bitmask of components containing the pixel.
    cover_counts: [usize; 8],
    hardness: f64,
    prompt_difficulty: f64,
    salience: Vec<f64>,
    ambiguity_severity: f64,
    group_excess: f64,
}

impl SyntheticSample {
    pub fn hardness(&self) -> f64 {
        self.hardness
    }

    pub fn n_components(&self) -> usize {
        self.comp_sd.len()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.gt.count() as f64 / (self.width * self.height) as f64
    }

    fn idx(&self, p: (usize, usize)) -> usize {
        p.0 * self.width + p.1
    }

    /// Bitmask of components that a model with corruption `noise` keeps.
    fn included(&self, prompt: &PointPrompt, noise: f64) -> u8 {
        let thr = self.prompt_difficulty * (noise / MISS_REFERENCE).min(1.0);
        let mut mask = 0u8;
        for (c, sd) in self.comp_sd.iter().enumerate() {
            let hit = prompt.points.iter().any(|&p| sd[self.idx(p)] > 0.0);
            if hit || self.salience[c] >= thr {
                mask |= 1 << c;
            }
        }
        mask
    }

    fn prompted(&self, prompt: &PointPrompt) -> u8 {
        let mut mask = 0u8;
        for (c, sd) in self.comp_sd.iter().enumerate() {
            if prompt.points.iter().any(|&p| sd[self.idx(p)] > 0.0) {
                mask |= 1 << c;
            }
        }
        mask
    }

    fn coverage(&self, included: u8) -> f64 {
        let total: usize = self.cover_counts.iter().sum();
        let covered: usize = (1..8usize)
            .filter(|&m| m as u8 & included != 0)
            .map(|m| self.cover_counts[m])
            .sum();
        covered as f64 / total.max(1) as f64
    }

    /// Component whose part a part-level head segments.
    fn anchor_component(&self, prompt: &PointPrompt) -> usize {
        let i = self.idx(prompt.points[0]);
        let mut best = 0;
        for c in 1..self.comp_sd.len() {
            if self.comp_sd[c][i] > self.comp_sd[best][i] {
                best = c;
            }
        }
        best
    }

    fn target_sd(&self, g: Granularity, prompt: &PointPrompt, included: u8) -> Vec<f64> {
        let n = self.width * self.height;
        match g {
            Granularity::Part => self.part_sd[self.anchor_component(prompt)].clone(),
            Granularity::Object | Granularity::Group => {
                let mut v = vec![f64::NEG_INFINITY; n];
                for (c, sd) in self.comp_sd.iter().enumerate() {
                    if included & (1 << c) != 0 {
                        v.iter_mut().zip(sd).for_each(|(a, &b)| *a = a.max(b));
                    }
                }
                if g == Granularity::Group {
                    v.iter_mut()
                        .zip(&self.distractor_sd)
                        .for_each(|(a, &b)| *a = a.max(b));
                }
                // nothing kept: a far-away background level
                v.iter_mut().for_each(|a| {
                    if a.is_infinite() {
                        *a = -10.0
                    }
                });
                v
            }
        }
    }
}

/// Builds a random scene. Errors only for an invalid world.
pub fn synthesize_sample(world: &SyntheticWorld, sample_seed: u64) -> Result<SyntheticSample> {
    world.validate()?;
    let (h, w) = world.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[world.seed, sample_seed, 0x5CE7E]));
    let scale = h.min(w) as f64 / 32.0;
    let (hf, wf) = (h as f64, w as f64);
    let clamp_r = |r: f64| r.clamp(2.0, hf - 3.0);
    let clamp_c = |c: f64| c.clamp(2.0, wf - 3.0);

    loop {
        let u: f64 = rng.random();
        let n_comp = if u < 0.45 {
            1
        } else if u < 0.8 {
            2
        } else {
            3
        };
        let mut comps = Vec::with_capacity(n_comp);
        comps.push(Ellipse {
            cr: rng.random_range(0.3 * hf..0.7 * hf),
            cc: rng.random_range(0.3 * wf..0.7 * wf),
            a: rng.random_range(3.5..7.5) * scale,
            b: rng.random_range(3.5..7.5) * scale,
            angle: rng.random_range(0.0..PI),
        });
        for _ in 1..n_comp {
            let a = rng.random_range(2.5..5.5) * scale;
            let b = rng.random_range(2.5..5.5) * scale;
            let p = comps[0];
            let dir = rng.random_range(0.0..2.0 * PI);
            let dist = ((p.a + p.b) / 2.0 + (a + b) / 2.0) * rng.random_range(0.7..1.3);
            comps.push(Ellipse {
                cr: clamp_r(p.cr + dist * dir.sin()),
                cc: clamp_c(p.cc + dist * dir.cos()),
                a,
                b,
                angle: rng.random_range(0.0..PI),
            });
        }
        let distractor = {
            let a = rng.random_range(3.0..6.0) * scale;
            let b = rng.random_range(3.0..6.0) * scale;
            let p = comps[0];
            let dir = rng.random_range(0.0..2.0 * PI);
            let dist = ((p.a + p.b) / 2.0 + (a + b) / 2.0) * rng.random_range(0.9..1.2);
            Ellipse {
                cr: clamp_r(p.cr + dist * dir.sin()),
                cc: clamp_c(p.cc + dist * dir.cos()),
                a,
                b,
                angle: rng.random_range(0.0..PI),
            }
        };
        let hardness = rng.random_range(0.4f64.ln()..2.5f64.ln()).exp();
        let prompt_difficulty: f64 = rng.random();
        let salience: Vec<f64> = (0..n_comp).map(|_| rng.random()).collect();
        let ambiguous = rng.random::<f64>() < world.ambiguity;

        let comp_sd: Vec<Vec<f64>> = comps.iter().map(|e| e.sd_map(h, w)).collect();
        let part_sd: Vec<Vec<f64>> = comps.iter().map(|e| e.shrunk(0.55).sd_map(h, w)).collect();
        let distractor_sd = distractor.sd_map(h, w);

        let mut cover_counts = [0usize; 8];
        let mut gt_data = vec![false; h * w];
        for (i, g) in gt_data.iter_mut().enumerate() {
            let mut bits = 0usize;
            for (c, sd) in comp_sd.iter().enumerate() {
                if sd[i] > 0.0 {
                    bits |= 1 << c;
                }
            }
            if bits != 0 {
                *g = true;
                cover_counts[bits] += 1;
            }
        }
        let gt = BinaryMask::new(w, h, gt_data)?;
        let part = BinaryMask::new(w, h, part_sd[0].iter().map(|&v| v > 0.0).collect())?;
        // a usable object needs room for a refined prompt and a visible part
        if gt.count() < 16 || part.is_empty() {
            continue;
        }
        let group = BinaryMask::new(
            w,
            h,
            gt.data()
                .iter()
                .zip(&distractor_sd)
                .map(|(&g, &d)| g || d > 0.0)
                .collect(),
        )?;
        let (ambiguity_severity, group_excess) = if ambiguous {
            (
                1.0 - part.count() as f64 / gt.count() as f64,
                1.0 - gt.count() as f64 / group.count() as f64,
            )
        } else {
            (0.0, 0.0)
        };
        let image = render(&comp_sd, &distractor_sd, h, w, hardness, &mut rng)?;
        return Ok(SyntheticSample {
            sample_seed,
            image,
            gt: gt.clone(),
            family: TaskFamily {
                ambiguous,
                part,
                object: gt,
                group,
            },
            height: h,
            width: w,
            comp_sd,
            part_sd,
            distractor_sd,
            cover_counts,
            hardness,
            prompt_difficulty,
            salience,
            ambiguity_severity,
            group_excess,
        });
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn render(
    comp_sd: &[Vec<f64>],
    distractor_sd: &[f64],
    h: usize,
    w: usize,
    hardness: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RgbImage> {
    let contrast = (1.0 / hardness.sqrt()).clamp(0.3, 1.6);
    let bg = [90.0, 110.0, 95.0];
    let obj = [
        bg[0] + 110.0 * contrast,
        bg[1] - 30.0 * contrast,
        bg[2] - 40.0 * contrast,
    ];
    let dis = [obj[0] - 20.0, obj[1] + 12.0, obj[2] + 10.0];
    let (fr, fc, ph): (f64, f64, f64) = (
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.4),
        rng.random_range(0.0..2.0 * PI),
    );
    let normal = Normal::new(0.0, 6.0).expect("valid sigma");
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let o = comp_sd.iter().map(|sd| sd[i]).fold(f64::NEG_INFINITY, f64::max);
            let wo = sigmoid(2.0 * o);
            let wd = sigmoid(2.0 * distractor_sd[i]) * (1.0 - wo);
            let tex = 12.0 * (fr * r as f64 + ph).sin() * (fc * c as f64).cos();
            for ch in 0..3 {
                let v = (1.0 - wo - wd) * bg[ch] + wo * obj[ch] + wd * dis[ch]
                    + tex
                    + normal.sample(rng);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(w, h, data)
}

/// SamScore model: the head's IoU against its own target plus Gaussian
/// estimation error, clamped to `[0,1]`.
pub fn synthetic_sam_score(true_iou: f64, sigma: f64, seed: u64) -> f64 {
    if sigma <= 0.0 {
        return true_iou.clamp(0.0, 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e: f64 = rng.sample(StandardNormal);
    (true_iou + sigma * e).clamp(0.0, 1.0)
}

/// Smooth random field with roughly unit variance.
fn random_field(seed: u64, h: usize, w: usize, scale: f64) -> Vec<f64> {
    const WAVES: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut amp = [0.0; WAVES];
    let mut rows = vec![[0.0f64; 2]; h * WAVES];
    let mut cols = vec![[0.0f64; 2]; w * WAVES];
    for j in 0..WAVES {
        let wavelength = rng.random_range(6.0..16.0) * scale;
        let dir = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        amp[j] = rng.random_range(0.5..1.0);
        let k = 2.0 * PI / wavelength;
        let (kr, kc) = (k * dir.sin(), k * dir.cos());
        for r in 0..h {
            let (s, c) = (kr * r as f64 + phase).sin_cos();
            rows[r * WAVES + j] = [c, s];
        }
        for c in 0..w {
            let (s, co) = (kc * c as f64).sin_cos();
            cols[c * WAVES + j] = [co, s];
        }
    }
    let norm = (2.0 / amp.iter().map(|a| a * a).sum::<f64>()).sqrt();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut v = 0.0;
            for j in 0..WAVES {
                let [rc, rs] = rows[r * WAVES + j];
                let [cc, cs] = cols[c * WAVES + j];
                // cos(a + b)
                v += amp[j] * (rc * cc - rs * cs);
            }
            out.push(v * norm);
        }
    }
    out
}

/// Latent quantities the synthetic tokens are projected from, for one pass.
///
/// The two token halves see complementary parts: the mask half knows which
/// proposal it belongs to and what the models cover, the IoU half how well
/// the proposals fit and how ambiguous the task is.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    /// Fraction of the object each model keeps under this prompt.
    pub coverage: [f64; 4],
    /// Boundary sharpness per model, `exp(-1.6 · strength / r_eff)`.
    pub boundary: [f64; 4],
    /// Fraction of the object in components no prompt point touches.
    pub unprompted: f64,
    pub ambiguous: bool,
    /// `1 − |part| / |object|` for ambiguous samples, else 0.
    pub ambiguity_severity: f64,
    /// `1 − |object| / |group|` for ambiguous samples, else 0.
    pub group_excess: f64,
    /// Each proposal's IoU against the granularity it targets.
    pub own_ious: [f64; NUM_HEADS],
    pub sam_scores: [f64; NUM_HEADS],
    pub degradation: f64,
    pub log_hardness: f64,
    pub prompt_points: usize,
}

const MASK_FEATURES: usize = 10;
const IOU_FEATURES: usize = 14;

impl TokenFeatures {
    fn mask_part(&self, head: usize) -> [f64; MASK_FEATURES] {
        let c = |x: f64| 2.0 * x - 1.0;
        let mut onehot = [-1.0; NUM_HEADS];
        onehot[head.min(NUM_HEADS - 1)] = 1.0;
        [
            c(self.coverage[0]),
            c(self.coverage[1]),
            c(self.coverage[2]),
            c(self.coverage[3]),
            c(self.unprompted),
            onehot[0],
            onehot[1],
            onehot[2],
            c((self.prompt_points as f64 / 8.0).min(1.0)),
            c(self.degradation),
        ]
    }

    fn iou_part(&self) -> [f64; IOU_FEATURES] {
        let c = |x: f64| 2.0 * x - 1.0;
        [
            c(self.boundary[0]),
            c(self.boundary[1]),
            c(self.boundary[2]),
            c(self.boundary[3]),
            c(self.sam_scores[0]),
            c(self.sam_scores[1]),
            c(self.sam_scores[2]),
            c(self.own_ious[0]),
            c(self.own_ious[1]),
            c(self.own_ious[2]),
            if self.ambiguous { 1.0 } else { -1.0 },
            c(self.ambiguity_severity),
            c(self.group_excess),
            self.log_hardness,
        ]
    }
}

/// Deterministic synthetic SAM: the world plus its fixed token projections.
#[derive(Debug, Clone)]
pub struct SyntheticSam {
    world: SyntheticWorld,
    proj_mask: Vec<[f64; MASK_FEATURES]>,
    proj_iou: Vec<[f64; IOU_FEATURES]>,
}

impl SyntheticSam {
    pub fn new(world: SyntheticWorld) -> Result<Self> {
        world.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[world.seed, 0x9A0_1EC7]));
        let sm = 1.0 / (MASK_FEATURES as f64).sqrt();
        let si = 1.0 / (IOU_FEATURES as f64).sqrt();
        let mut proj_mask = vec![[0.0; MASK_FEATURES]; MASK_TOKEN.len()];
        for row in &mut proj_mask {
            for v in row.iter_mut() {
                *v = sm * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut proj_iou = vec![[0.0; IOU_FEATURES]; IOU_TOKEN.len()];
        for row in &mut proj_iou {
            for v in row.iter_mut() {
                *v = si * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Self {
            world,
            proj_mask,
            proj_iou,
        })
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    pub fn sample(&self, sample_seed: u64) -> Result<SyntheticSample> {
        synthesize_sample(&self.world, sample_seed)
    }

    /// Backend bound to one scene.
    pub fn scene<'a>(&'a self, sample: &'a SyntheticSample) -> SceneBackend<'a> {
        SceneBackend { sam: self, sample }
    }

    /// Projects latent features to the 512-d token of proposal `head`.
    ///
    /// The mask-token half carries per-proposal noise keyed by `mask_seed`;
    /// the IoU-token half is shared by all proposals of a pass and keyed by
    /// `iou_seed`.
    pub fn tokens(&self, f: &TokenFeatures, head: usize, mask_seed: u64, iou_seed: u64) -> Vec<f64> {
        let sigma = self.world.token_noise;
        let mut out = Vec::with_capacity(TOKEN_DIM);
        let m = f.mask_part(head);
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        for row in &self.proj_mask {
            let v: f64 = row.iter().zip(&m).map(|(a, b)| a * b).sum();
            let e: f64 = rng.sample(StandardNormal);
            out.push(round_f32(v + sigma * e));
        }
        let i = f.iou_part();
        let mut rng = ChaCha8Rng::seed_from_u64(iou_seed);
        for row in &self.proj_iou {
            let v: f64 = row.iter().zip(&i).map(|(a, b)| a * b).sum();
            let e: f64 = rng.sample(StandardNormal);
            out.push(round_f32(v + sigma * e));
        }
        out
    }

    fn strength(&self, sample: &SyntheticSample, model: ModelId, degradation: f64, n_points: usize) -> f64 {
        self.world.noise(model)
            * sample.hardness
            * (1.0 + 2.0 * degradation)
            * (-self.world.prompt_gain * (n_points.saturating_sub(1)) as f64).exp()
    }
}

/// Values are stored as `f32` on disk; keeping them representable makes
/// in-memory and file-based runs agree bit for bit.
fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// [`SyntheticSam`] bound to a single scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneBackend<'a> {
    sam: &'a SyntheticSam,
    sample: &'a SyntheticSample,
}

impl SegmentationBackend for SceneBackend<'_> {
    fn forward(
        &self,
        image: &RgbImage,
        prompt: &PointPrompt,
        model: ModelId,
    ) -> Result<ForwardOutput> {
        let s = self.sample;
        let (h, w) = (s.height, s.width);
        if image.width() != w || image.height() != h {
            return Err(Error::InvalidImage(format!(
                "backend expects {w}x{h}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        prompt.check_bounds(w, h)?;

        // The backend sees only pixels: recover orientation and degradation
        // by comparing against the clean render.
        let d_id = image.mean_abs_diff(&s.image);
        let d_flip = image.mean_abs_diff(&s.image.flip_rows());
        let flipped = d_flip < d_id;
        let degradation = (d_id.min(d_flip) / 255.0 * 8.0).min(1.0);
        let prompt = if flipped {
            prompt.flip_rows(h)
        } else {
            prompt.clone()
        };
        let image_key = if degradation > 0.0 {
            seed::hash_bytes(image.data())
        } else {
            0
        };
        let prompt_key = seed::hash_bytes(
            &prompt
                .points
                .iter()
                .flat_map(|&(r, c)| [(r as u64).to_le_bytes(), (c as u64).to_le_bytes()])
                .flatten()
                .collect::<Vec<u8>>(),
        );

        let world = &self.sam.world;
        let included_by: [u8; 4] = ModelId::ALL.map(|m| s.included(&prompt, world.noise(m)));
        let coverage = included_by.map(|inc| s.coverage(inc));
        let r_eff = (s.gt.count() as f64 / PI).sqrt().max(1.0);
        let mut boundary = [0.0; 4];
        for m in ModelId::ALL {
            let st = self.sam.strength(s, m, degradation, prompt.len());
            boundary[m.index()] = (-1.6 * st / r_eff).exp();
        }
        let unprompted = 1.0 - s.coverage(s.prompted(&prompt));

        let strength = self.sam.strength(s, model, degradation, prompt.len());
        let included = included_by[model.index()];
        let scale = h.min(w) as f64 / 32.0;
        let targets = s.family.head_targets();

        let pass_key = seed::derive(&[
            world.seed,
            s.sample_seed,
            model.index() as u64,
            prompt_key,
            image_key,
        ]);
        let mut masks = Vec::with_capacity(NUM_HEADS);
        let mut own_ious = [0.0; NUM_HEADS];
        let mut scores = [0.0; NUM_HEADS];
        for (head, &g) in targets.iter().enumerate() {
            let key = seed::derive(&[pass_key, head as u64]);
            let target = s.target_sd(g, &prompt, included);
            let probs: Vec<f64> = if strength > 0.0 {
                let field = random_field(key, h, w, scale);
                let tau = 0.5 * strength;
                target
                    .iter()
                    .zip(&field)
                    .map(|(&t, &f)| round_f32(sigmoid((t + strength * f) / tau)))
                    .collect()
            } else {
                target.iter().map(|&t| if t > 0.0 { 1.0 } else { 0.0 }).collect()
            };
            let pm = ProbMask::new(w, h, probs)?;
            let target_mask = BinaryMask::new(w, h, target.iter().map(|&t| t > 0.0).collect())?;
            own_ious[head] = iou(&pm.to_binary(), &target_mask)?;
            scores[head] = round_f32(synthetic_sam_score(
                own_ious[head],
                world.score_noise,
                seed::derive(&[key, 0x5C0]),
            ));
            masks.push(if flipped { pm.flip_rows() } else { pm });
        }

        let features = TokenFeatures {
            coverage,
            boundary,
            unprompted,
            ambiguous: s.family.ambiguous,
            ambiguity_severity: s.ambiguity_severity,
            group_excess: s.group_excess,
            own_ious,
            sam_scores: scores,
            degradation,
            log_hardness: s.hardness.ln(),
            prompt_points: prompt.len(),
        };
        let iou_seed = seed::derive(&[pass_key, 0x10C]);
        let tokens: [Vec<f64>; NUM_HEADS] = std::array::from_fn(|head| {
            let mask_seed = seed::derive(&[pass_key, head as u64, 0x70C]);
            self.sam.tokens(&features, head, mask_seed, iou_seed)
        });
        let masks: [ProbMask; NUM_HEADS] = masks.try_into().expect("three heads");
        Ok(ForwardOutput {
            masks,
            sam_scores: scores,
            tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{apply_augmentation, centroid_prompt, sample_prompt_points, AugKind};

    fn best_iou(out: &ForwardOutput, gt: &BinaryMask) -> f64 {
        out.masks
            .iter()
            .map(|m| iou(&m.to_binary(), gt).unwrap())
            .fold(0.0, f64::max)
    }

    #[test]
    fn forward_is_deterministic() {
        let sam = SyntheticSam::new(SyntheticWorld::with_seed(3)).unwrap();
        let s = sam.sample(11).unwrap();
        let p = centroid_prompt(&s.gt).unwrap();
        let a = sam.scene(&s).forward(&s.image, &p, ModelId::T).unwrap();
        let b = sam.scene(&s).forward(&s.image, &p, ModelId::T).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(a.tokens.iter().all(|t| t.len() == TOKEN_DIM));
    }

    #[test]
    fn noiseless_world_reproduces_gt() {
        let sam = SyntheticSam::new(SyntheticWorld::noiseless(5)).unwrap();
        for seed in 0..20 {
            let s = sam.sample(seed).unwrap();
            assert!(!s.family.ambiguous);
            let p = centroid_prompt(&s.gt).unwrap();
            for m in ModelId::ALL {
                let out = sam.scene(&s).forward(&s.image, &p, m).unwrap();
                assert_eq!(out.masks[0].to_binary(), s.gt);
                assert_eq!(iou(&out.masks[0].to_binary(), &s.gt).unwrap(), 1.0);
                assert!(out.sam_scores.iter().all(|&x| x == 1.0));
            }
        }
    }

    #[test]
    fn ambiguity_controls_head_targets() {
        let mut w = SyntheticWorld::with_seed(1);
        w.ambiguity = 0.0;
        let s = synthesize_sample(&w, 4).unwrap();
        assert_eq!(s.family.head_targets(), [Granularity::Object; 3]);
        w.ambiguity = 1.0;
        let s = synthesize_sample(&w, 4).unwrap();
        assert_eq!(
            s.family.head_targets(),
            [Granularity::Part, Granularity::Object, Granularity::Group]
        );
        assert!(s.family.part.count() < s.family.object.count());
        assert!(s.family.group.count() > s.family.object.count());
    }

    #[test]
    fn foreground_fraction_bounds() {
        let w = SyntheticWorld::default();
        let (mut lo, mut hi) = (1.0f64, 0.0f64);
        for seed in 0..1000 {
            let f = synthesize_sample(&w, seed).unwrap().foreground_fraction();
            lo = lo.min(f);
            hi = hi.max(f);
        }
        assert!(lo >= 0.02 && hi <= 0.60, "{lo} {hi}");
    }

    #[test]
    fn sam_score_model() {
        assert_eq!(synthetic_sam_score(0.37, 0.0, 9), 0.37);
        for s in 0..200 {
            let v = synthetic_sam_score(0.95, 0.5, s);
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(synthetic_sam_score(0.5, 0.1, 7), synthetic_sam_score(0.5, 0.1, 7));
    }

    #[test]
    fn sam_score_correlates_with_iou() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| synthetic_sam_score(x, 0.05, i as u64))
            .collect();
        let r = crate::eval::pearson(&xs, &ys).unwrap();
        assert!(r > 0.9, "{r}");
    }

    #[test]
    fn tokens_depend_on_nuisance_seed() {
        let sam = SyntheticSam::new(SyntheticWorld::default()).unwrap();
        let f = TokenFeatures {
            coverage: [1.0; 4],
            boundary: [0.8; 4],
            unprompted: 0.0,
            ambiguous: false,
            ambiguity_severity: 0.0,
            group_excess: 0.0,
            own_ious: [0.9; 3],
            sam_scores: [0.85; 3],
            degradation: 0.0,
            log_hardness: 0.0,
            prompt_points: 1,
        };
        let a = sam.tokens(&f, 1, 1, 5);
        let b = sam.tokens(&f, 1, 2, 5);
        assert_eq!(a.len(), TOKEN_DIM);
        assert_ne!(a, b);
        assert_eq!(a[IOU_TOKEN], b[IOU_TOKEN]);
    }

    #[test]
    fn flipped_input_gives_flipped_prediction() {
        let sam = SyntheticSam::new(SyntheticWorld::with_seed(2)).unwrap();
        let s = sam.sample(8).unwrap();
        let p = centroid_prompt(&s.gt).unwrap();
        let base = sam.scene(&s).forward(&s.image, &p, ModelId::S).unwrap();
        let img = apply_augmentation(&s.image, AugKind::VerticalFlip, 0).unwrap();
        let out = sam
            .scene(&s)
            .forward(&img, &p.flip_rows(s.image.height()), ModelId::S)
            .unwrap();
        for h in 0..3 {
            assert_eq!(out.masks[h].flip_rows(), base.masks[h]);
        }
    }

    #[test]
    fn rejects_out_of_bounds_prompt() {
        let sam = SyntheticSam::new(SyntheticWorld::default()).unwrap();
        let s = sam.sample(0).unwrap();
        let p = PointPrompt::single(100, 0);
        assert!(sam.scene(&s).forward(&s.image, &p, ModelId::L).is_err());
    }

    #[test]
    fn invalid_worlds_rejected() {
        let mut w = SyntheticWorld::default();
        w.model_noise = [1.0, 0.5, 0.6, 0.9];
        assert!(w.validate().is_err());
        let mut w = SyntheticWorld::default();
        w.image_size = (8, 32);
        assert!(w.validate().is_err());
        let mut w = SyntheticWorld::default();
        w.ambiguity = 1.5;
        assert!(SyntheticSam::new(w).is_err());
    }

    #[test]
    fn larger_models_and_denser_prompts_are_better() {
        let mut sums = [0.0; 4];
        let mut single = 0.0;
        let mut dense = 0.0;
        let n = 120;
        for world_seed in 0..n {
            let sam = SyntheticSam::new(SyntheticWorld::with_seed(world_seed)).unwrap();
            let s = sam.sample(world_seed * 7 + 1).unwrap();
            let p1 = centroid_prompt(&s.gt).unwrap();
            let p8 = sample_prompt_points(&s.gt, 8, 0).unwrap();
            for m in ModelId::ALL {
                let out = sam.scene(&s).forward(&s.image, &p1, m).unwrap();
                sums[m.index()] += best_iou(&out, &s.gt);
            }
            let o1 = sam.scene(&s).forward(&s.image, &p1, ModelId::T).unwrap();
            let o8 = sam.scene(&s).forward(&s.image, &p8, ModelId::T).unwrap();
            single += best_iou(&o1, &s.gt);
            dense += best_iou(&o8, &s.gt);
        }
        let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        assert!(means.windows(2).all(|p| p[0] >= p[1]), "{means:?}");
        assert!(means[ModelId::T.index()] < means[ModelId::L.index()]);
        assert!(dense >= single, "{dense} {single}");
    }
}
