//! Monte-Carlo entropy estimators.
//!
//! Each estimator forms a convex mixture of probability maps drawn from a
//! [`SampleSet`] and summarizes it with [`weighted_mask_entropy`]:
//!
//! | estimator            | mixes over                         | weights                     |
//! |----------------------|------------------------------------|-----------------------------|
//! | [`predictive_entropy`] | augmentations × prompts × models × heads | `p(head) / (#aug·#prompt·#model)` |
//! | [`epistemic_entropy`]  | models (best head each)             | `1 / #model`                |
//! | [`prompt_entropy`]     | prompts (best head each)            | `1 / #prompt`               |
//! | [`task_entropy`]       | heads                               | `p(head)` from SamScores    |
//!
//! Masks predicted on geometrically augmented images are stored already
//! warped back into the ground-truth frame, so mixing is pixelwise.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::backend::{SegmentationBackend, TOKEN_DIM};
use crate::error::{Error, Result};
use crate::mask::{iou, weighted_mask_entropy, BinaryMask, Method, ProbMask, UncScore};
use crate::sampling::{
    apply_augmentation_with, enumerate_subgrid, sample_prompt_points, AugKind, AugParams, ModelId,
    PointPrompt, RgbImage, SampleConfig, NUM_HEADS,
};
use crate::seed;

/// One stored prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub config: SampleConfig,
    pub mask: ProbMask,
    pub sam_score: f64,
    pub tokens: Vec<f64>,
}

/// All predictions for one `(image, task)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub image_id: String,
    pub gt: BinaryMask,
    pub n_prompts: usize,
    records: Vec<Record>,
    /// Identity-augmentation predictions with the refined (all points)
    /// prompt; `config.prompt_index` is unused and stored as 0.
    refined: Vec<Record>,
    index: HashMap<SampleConfig, usize>,
    degenerate: bool,
}

impl SampleSet {
    /// Builds a set whose estimators require the cells they mix to exist.
    pub fn new(
        image_id: impl Into<String>,
        gt: BinaryMask,
        n_prompts: usize,
        records: Vec<Record>,
        refined: Vec<Record>,
    ) -> Result<Self> {
        Self::build(image_id.into(), gt, n_prompts, records, refined, false)
    }

    /// Test mode: arbitrary hand-built record lists. Estimators mix whatever
    /// cells are present instead of demanding the full grid, and tokens are
    /// not checked.
    pub fn degenerate(gt: BinaryMask, n_prompts: usize, records: Vec<Record>) -> Result<Self> {
        Self::build("degenerate".into(), gt, n_prompts, records, Vec::new(), true)
    }

    fn build(
        image_id: String,
        gt: BinaryMask,
        n_prompts: usize,
        mut records: Vec<Record>,
        mut refined: Vec<Record>,
        degenerate: bool,
    ) -> Result<Self> {
        if n_prompts == 0 {
            return Err(Error::InvalidSampleSet("n_prompts must be >= 1".into()));
        }
        records.sort_by_key(|r| r.config);
        refined.sort_by_key(|r| (r.config.model, r.config.head));
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().chain(&refined).enumerate() {
            let cfg = r.config;
            if cfg.head >= NUM_HEADS {
                return Err(Error::InvalidSampleSet(format!("{cfg}: head out of range")));
            }
            if i < records.len() && cfg.prompt_index >= n_prompts {
                return Err(Error::InvalidSampleSet(format!(
                    "{cfg}: prompt index >= n_prompts {n_prompts}"
                )));
            }
            if r.mask.width() != gt.width() || r.mask.height() != gt.height() {
                return Err(Error::InvalidSampleSet(format!(
                    "{cfg}: mask {}x{} does not match ground truth {}x{}",
                    r.mask.width(),
                    r.mask.height(),
                    gt.width(),
                    gt.height()
                )));
            }
            if !degenerate && r.tokens.len() != TOKEN_DIM {
                return Err(Error::InvalidSampleSet(format!(
                    "{cfg}: token length {} != {TOKEN_DIM}",
                    r.tokens.len()
                )));
            }
            if !(r.sam_score.is_finite() && r.sam_score >= 0.0) {
                return Err(Error::InvalidSampleSet(format!(
                    "{cfg}: SamScore {} must be finite and >= 0",
                    r.sam_score
                )));
            }
            if i < records.len() && index.insert(cfg, i).is_some() {
                return Err(Error::InvalidSampleSet(format!("duplicate record {cfg}")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for r in &refined {
            if r.config.aug != AugKind::Identity || !seen.insert((r.config.model, r.config.head)) {
                return Err(Error::InvalidSampleSet(format!(
                    "refined record {} must be identity and unique per (model, head)",
                    r.config
                )));
            }
        }
        Ok(Self {
            image_id,
            gt,
            n_prompts,
            records,
            refined,
            index,
            degenerate,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn refined_records(&self) -> &[Record] {
        &self.refined
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn record(&self, cfg: &SampleConfig) -> Option<&Record> {
        self.index.get(cfg).map(|&i| &self.records[i])
    }

    pub fn refined(&self, model: ModelId, head: usize) -> Option<&Record> {
        self.refined
            .iter()
            .find(|r| r.config.model == model && r.config.head == head)
    }

    /// The three proposals of one forward pass, or an error naming the gaps.
    pub fn heads(&self, aug: AugKind, prompt_index: usize, model: ModelId) -> Result<[&Record; NUM_HEADS]> {
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(NUM_HEADS);
        for head in 0..NUM_HEADS {
            let cfg = SampleConfig {
                aug,
                prompt_index,
                model,
                head,
            };
            match self.record(&cfg) {
                Some(r) => out.push(r),
                None => missing.push(cfg.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingConfigs { missing });
        }
        Ok(out.try_into().expect("three heads"))
    }

    pub fn refined_heads(&self, model: ModelId) -> Result<[&Record; NUM_HEADS]> {
        let heads: Vec<&Record> = (0..NUM_HEADS).filter_map(|h| self.refined(model, h)).collect();
        heads.try_into().map_err(|_| Error::MissingConfigs {
            missing: vec![format!("refined prompt, model={model}")],
        })
    }

    /// Cells of `expected` that are absent.
    pub fn missing(&self, expected: &[SampleConfig]) -> Vec<String> {
        expected
            .iter()
            .filter(|c| !self.index.contains_key(c))
            .map(|c| c.to_string())
            .collect()
    }

    pub fn has_full_grid(&self) -> bool {
        self.missing(&enumerate_subgrid(&AugKind::ALL, self.n_prompts)).is_empty()
    }

    /// Records in a single forward pass, keyed by `(aug, prompt, model)`.
    fn passes(&self) -> BTreeMap<(AugKind, usize, ModelId), Vec<&Record>> {
        let mut groups: BTreeMap<_, Vec<&Record>> = BTreeMap::new();
        for r in &self.records {
            let c = r.config;
            groups.entry((c.aug, c.prompt_index, c.model)).or_default().push(r);
        }
        groups
    }
}

/// `p(head | image, prompt, model)` for the three proposals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskProbs {
    pub probs: [f64; NUM_HEADS],
}

/// SamScores normalized to a distribution; uniform when all are zero.
pub fn task_probs(sam_scores: [f64; NUM_HEADS]) -> Result<TaskProbs> {
    let p = normalize_scores(&sam_scores)?;
    Ok(TaskProbs {
        probs: p.try_into().expect("three heads"),
    })
}

fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(&s) = scores.iter().find(|&&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(Error::NegativeScore(s));
    }
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        let u = 1.0 / scores.len() as f64;
        return Ok(vec![u; scores.len()]);
    }
    Ok(scores.iter().map(|s| s / total).collect())
}

/// Head whose thresholded mask has the highest IoU with `gt`; ties go to the
/// lowest index.
pub fn best_head(gt: &BinaryMask, masks: &[&ProbMask]) -> Result<usize> {
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (h, m) in masks.iter().enumerate() {
        let v = iou(&m.to_binary(), gt)?;
        if v > best_iou {
            best_iou = v;
            best = h;
        }
    }
    Ok(best)
}

/// `Σ wᵢ·pᵢ / Σ wᵢ` per pixel. Dividing by the sum accumulated in the same
/// order keeps pixels where every mask says 0 or 1 exactly at 0 or 1, which
/// the entropy clamp would otherwise inflate.
fn mix(shape: &BinaryMask, parts: &[(f64, &ProbMask)]) -> Result<ProbMask> {
    let total: f64 = parts.iter().fold(0.0, |t, (w, _)| t + w);
    if !(total > 0.0) {
        return Err(Error::InvalidSampleSet("mixture weights sum to zero".into()));
    }
    let mut acc = vec![0.0; shape.width() * shape.height()];
    for (w, m) in parts {
        for (a, &p) in acc.iter_mut().zip(m.data()) {
            *a += w * p;
        }
    }
    acc.iter_mut().for_each(|a| *a = (*a / total).clamp(0.0, 1.0));
    ProbMask::new(shape.width(), shape.height(), acc)
}

/// Mixture behind [`predictive_entropy`] together with its total weight.
pub fn predictive_mixture(s: &SampleSet) -> Result<(ProbMask, f64)> {
    if !s.degenerate {
        let missing = s.missing(&enumerate_subgrid(&AugKind::ALL, s.n_prompts));
        if !missing.is_empty() {
            return Err(Error::MissingConfigs { missing });
        }
    }
    let passes = s.passes();
    if passes.is_empty() {
        return Err(Error::InvalidSampleSet("no records".into()));
    }
    let n_passes = passes.len() as f64;
    let mut parts = Vec::with_capacity(s.records.len());
    for recs in passes.values() {
        let scores: Vec<f64> = recs.iter().map(|r| r.sam_score).collect();
        let probs = normalize_scores(&scores)?;
        for (r, p) in recs.iter().zip(probs) {
            parts.push((p / n_passes, &r.mask));
        }
    }
    let total = parts.iter().map(|(w, _)| w).sum();
    Ok((mix(&s.gt, &parts)?, total))
}

/// Entropy of the SamScore-weighted mixture over the whole sampling grid.
pub fn predictive_entropy(s: &SampleSet) -> Result<UncScore> {
    let (m, _) = predictive_mixture(s)?;
    Ok(weighted_mask_entropy(&m).retag(Method::PredictiveEntropy))
}

/// Best-head mask of each present identity pass selected by `keep`.
fn best_masks<'a>(
    s: &'a SampleSet,
    gt: &BinaryMask,
    keep: impl Fn(usize, ModelId) -> bool,
) -> Result<Vec<(usize, ModelId, &'a ProbMask)>> {
    let mut out = Vec::new();
    for ((aug, prompt, model), recs) in s.passes() {
        if aug != AugKind::Identity || !keep(prompt, model) {
            continue;
        }
        let masks: Vec<&ProbMask> = recs.iter().map(|r| &r.mask).collect();
        let b = best_head(gt, &masks)?;
        out.push((prompt, model, masks[b]));
    }
    Ok(out)
}

pub fn epistemic_mixture(s: &SampleSet, prompt_index: usize, gt: &BinaryMask) -> Result<ProbMask> {
    if !s.degenerate {
        for m in ModelId::ALL {
            s.heads(AugKind::Identity, prompt_index, m)?;
        }
    }
    let picked = best_masks(s, gt, |p, _| p == prompt_index)?;
    if picked.is_empty() {
        return Err(Error::MissingModel(ModelId::L));
    }
    let w = 1.0 / picked.len() as f64;
    let parts: Vec<(f64, &ProbMask)> = picked.iter().map(|&(_, _, m)| (w, m)).collect();
    mix(gt, &parts)
}

/// Disagreement between model sizes at a fixed prompt.
pub fn epistemic_entropy(s: &SampleSet, prompt_index: usize, gt: &BinaryMask) -> Result<UncScore> {
    let m = epistemic_mixture(s, prompt_index, gt)?;
    Ok(weighted_mask_entropy(&m).retag(Method::EpistemicEntropy))
}

pub fn prompt_mixture(s: &SampleSet, model: ModelId, gt: &BinaryMask) -> Result<ProbMask> {
    if !s.degenerate {
        for p in 0..s.n_prompts {
            s.heads(AugKind::Identity, p, model)?;
        }
    }
    let picked = best_masks(s, gt, |_, m| m == model)?;
    if picked.is_empty() {
        return Err(Error::MissingModel(model));
    }
    let w = 1.0 / picked.len() as f64;
    let parts: Vec<(f64, &ProbMask)> = picked.iter().map(|&(_, _, m)| (w, m)).collect();
    mix(gt, &parts)
}

/// Disagreement between single-point prompts for a fixed model.
pub fn prompt_entropy(s: &SampleSet, model: ModelId, gt: &BinaryMask) -> Result<UncScore> {
    let m = prompt_mixture(s, model, gt)?;
    Ok(weighted_mask_entropy(&m).retag(Method::PromptEntropy))
}

pub fn task_mixture(s: &SampleSet, prompt_index: usize, model: ModelId) -> Result<ProbMask> {
    let recs: Vec<&Record> = if s.degenerate {
        s.records
            .iter()
            .filter(|r| {
                r.config.aug == AugKind::Identity
                    && r.config.prompt_index == prompt_index
                    && r.config.model == model
            })
            .collect()
    } else {
        s.heads(AugKind::Identity, prompt_index, model)?.to_vec()
    };
    if recs.is_empty() {
        return Err(Error::MissingModel(model));
    }
    let scores: Vec<f64> = recs.iter().map(|r| r.sam_score).collect();
    let probs = normalize_scores(&scores)?;
    let parts: Vec<(f64, &ProbMask)> = recs.iter().zip(probs).map(|(r, p)| (p, &r.mask)).collect();
    mix(&s.gt, &parts)
}

/// SamScore-weighted disagreement between the three proposals. Needs no
/// ground truth.
pub fn task_entropy(s: &SampleSet, prompt_index: usize, model: ModelId) -> Result<UncScore> {
    let m = task_mixture(s, prompt_index, model)?;
    Ok(weighted_mask_entropy(&m).retag(Method::TaskEntropy))
}

/// Which cells of the sampling grid to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub augs: Vec<AugKind>,
    pub n_prompts: usize,
    /// Also predict with the refined prompt made of all prompt points.
    pub refined: bool,
    pub aug_params: AugParams,
}

impl GridSpec {
    pub fn full(n_prompts: usize) -> Self {
        Self {
            augs: AugKind::ALL.to_vec(),
            n_prompts,
            refined: true,
            aug_params: AugParams::default(),
        }
    }

    /// Identity augmentation only: enough for every estimator except the
    /// predictive entropy.
    pub fn identity(n_prompts: usize) -> Self {
        Self {
            augs: vec![AugKind::Identity],
            ..Self::full(n_prompts)
        }
    }
}

/// Runs the backend over the requested grid. Prompts are the
/// farthest-point samples of `gt` (the first is the centroid); the refined
/// prompt uses all of them at once.
pub fn build_sample_set(
    backend: &dyn SegmentationBackend,
    image_id: impl Into<String>,
    image: &RgbImage,
    gt: &BinaryMask,
    grid: &GridSpec,
    seed: u64,
) -> Result<SampleSet> {
    let points = sample_prompt_points(gt, grid.n_prompts, seed)?;
    let prompts: Vec<PointPrompt> = points
        .points
        .iter()
        .map(|&(r, c)| PointPrompt::single(r, c))
        .collect();
    let h = image.height();
    let mut records = Vec::with_capacity(grid.augs.len() * prompts.len() * 12);
    for &aug in &grid.augs {
        let aug_seed = seed::derive(&[seed, aug.index() as u64]);
        let img = apply_augmentation_with(image, aug, &grid.aug_params, aug_seed)?;
        for (prompt_index, p) in prompts.iter().enumerate() {
            let p = if aug.is_geometric() { p.flip_rows(h) } else { p.clone() };
            for model in ModelId::ALL {
                let out = backend.forward(&img, &p, model)?;
                out.validate()?;
                push_pass(&mut records, out, aug, prompt_index, model);
            }
        }
    }
    let mut refined = Vec::new();
    if grid.refined {
        for model in ModelId::ALL {
            let out = backend.forward(image, &points, model)?;
            out.validate()?;
            push_pass(&mut refined, out, AugKind::Identity, 0, model);
        }
    }
    SampleSet::new(image_id, gt.clone(), grid.n_prompts, records, refined)
}

fn push_pass(
    out: &mut Vec<Record>,
    pass: crate::backend::ForwardOutput,
    aug: AugKind,
    prompt_index: usize,
    model: ModelId,
) {
    let crate::backend::ForwardOutput {
        masks,
        sam_scores,
        tokens,
    } = pass;
    for (head, (mask, tokens)) in masks.into_iter().zip(tokens).enumerate() {
        // back into the ground-truth frame
        let mask = if aug.is_geometric() { mask.flip_rows() } else { mask };
        out.push(Record {
            config: SampleConfig {
                aug,
                prompt_index,
                model,
                head,
            },
            mask,
            sam_score: sam_scores[head],
            tokens,
        });
    }
}
