//! Post-hoc IoU heads over concatenated mask/IoU tokens and the uncertainty
//! quantities derived from them.
//!
//! Six heads regress IoUs: one per model size, one for the refined prompt
//! and one for the SamScore-selected proposal. Three more regress the gaps
//! directly (`Δ*`), trained on `(Δ + 1) / 2` so a sigmoid output fits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{argmax_first, IOU_TOKEN, MASK_TOKEN, TOKEN_DIM};
use crate::bayes::{best_head, Record, SampleSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, random_scores, MethodScores, Outcome, Scenario};
use crate::mask::{iou, Method, ProbMask, UncScore};
use crate::mlp::{self, mlp_forward, predict, Dataset, MlpParams, TrainConfig};
use crate::sampling::{AugKind, ModelId, NUM_HEADS};
use crate::seed;

/// Bounds applied to regression targets before the squared error.
pub const TARGET_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);

/// Token layout version written to head bundles.
pub const TOKEN_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadKind {
    /// Expected best-head IoU of a model size at the single prompt.
    Model(ModelId),
    /// Expected best-head IoU at the refined prompt.
    RefinedPrompt,
    /// Expected IoU of the highest-SamScore proposal.
    SamSelected,
    DirectModel,
    DirectPrompt,
    DirectTask,
}

impl HeadKind {
    pub const ALL: [HeadKind; 9] = [
        HeadKind::Model(ModelId::T),
        HeadKind::Model(ModelId::S),
        HeadKind::Model(ModelId::BPlus),
        HeadKind::Model(ModelId::L),
        HeadKind::RefinedPrompt,
        HeadKind::SamSelected,
        HeadKind::DirectModel,
        HeadKind::DirectPrompt,
        HeadKind::DirectTask,
    ];

    pub fn name(self) -> String {
        match self {
            HeadKind::Model(m) => format!("usam_{}", m.as_str()),
            HeadKind::RefinedPrompt => "usam_refined".into(),
            HeadKind::SamSelected => "usam_sam".into(),
            HeadKind::DirectModel => "direct_delta_model".into(),
            HeadKind::DirectPrompt => "direct_delta_prompt".into(),
            HeadKind::DirectTask => "direct_delta_task".into(),
        }
    }

    pub fn is_direct(self) -> bool {
        matches!(self, HeadKind::DirectModel | HeadKind::DirectPrompt | HeadKind::DirectTask)
    }

    fn seed_tag(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }

    /// Heads needed to score `method`; empty for methods that need none.
    pub fn required_for(method: Method, source: ModelId) -> Vec<HeadKind> {
        match method {
            Method::UsamPredictive => vec![HeadKind::Model(source)],
            Method::DeltaModel => vec![HeadKind::Model(ModelId::L), HeadKind::Model(ModelId::T)],
            Method::DeltaPrompt => vec![HeadKind::RefinedPrompt, HeadKind::Model(source)],
            Method::DeltaTask => vec![HeadKind::Model(source), HeadKind::SamSelected],
            Method::DirectDeltaModel => vec![HeadKind::DirectModel],
            Method::DirectDeltaPrompt => vec![HeadKind::DirectPrompt],
            Method::DirectDeltaTask => vec![HeadKind::DirectTask],
            _ => vec![],
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown head {s:?}")))
    }
}

/// One token vector and the IoUs its heads regress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub sample_id: u64,
    /// Model whose forward pass produced `tokens`.
    pub source: ModelId,
    pub tokens: Vec<f64>,
    /// Best-head IoU per model at the single prompt, by [`ModelId::index`].
    pub iou: [f64; 4],
    /// Best-head IoU of `source` at the refined prompt.
    pub iou_refined: f64,
    /// IoU of the highest-SamScore proposal of `source`.
    pub iou_sam_selected: f64,
}

impl TrainingExample {
    pub fn iou_of(&self, m: ModelId) -> f64 {
        self.iou[m.index()]
    }

    pub fn delta_model(&self) -> f64 {
        self.iou_of(ModelId::L) - self.iou_of(ModelId::T)
    }

    pub fn delta_prompt(&self) -> f64 {
        self.iou_refined - self.iou_of(self.source)
    }

    pub fn delta_task(&self) -> f64 {
        self.iou_of(self.source) - self.iou_sam_selected
    }

    /// Unclamped regression target in `[0, 1]`.
    pub fn raw_target(&self, kind: HeadKind) -> f64 {
        match kind {
            HeadKind::Model(m) => self.iou_of(m),
            HeadKind::RefinedPrompt => self.iou_refined,
            HeadKind::SamSelected => self.iou_sam_selected,
            HeadKind::DirectModel => (self.delta_model() + 1.0) / 2.0,
            HeadKind::DirectPrompt => (self.delta_prompt() + 1.0) / 2.0,
            HeadKind::DirectTask => (self.delta_task() + 1.0) / 2.0,
        }
    }

    pub fn target(&self, kind: HeadKind) -> f64 {
        self.raw_target(kind).clamp(TARGET_CLAMP.0, TARGET_CLAMP.1)
    }

    /// Before/after IoUs for the evaluation scenarios, seen from `source`.
    pub fn outcome(&self) -> Outcome {
        Outcome {
            sample_id: self.sample_id,
            iou_best: self.iou_of(self.source),
            iou_large: self.iou_of(ModelId::L),
            iou_refined: self.iou_refined,
            iou_selected: self.iou_sam_selected,
        }
    }
}

/// Index of the highest-SamScore proposal.
pub fn sam_selected(heads: &[&Record; NUM_HEADS]) -> usize {
    let scores: Vec<f64> = heads.iter().map(|r| r.sam_score).collect();
    argmax_first(&scores)
}

fn best_iou(set: &SampleSet, heads: &[&Record; NUM_HEADS]) -> Result<f64> {
    let masks: Vec<&ProbMask> = heads.iter().map(|r| &r.mask).collect();
    let b = best_head(&set.gt, &masks)?;
    iou(&masks[b].to_binary(), &set.gt)
}

/// One example per `(sample, source model)`. Tokens are those of the
/// source's highest-SamScore proposal at the first (centroid) prompt.
pub fn build_training_set(sets: &[SampleSet]) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::with_capacity(sets.len() * 4);
    for (i, set) in sets.iter().enumerate() {
        out.extend(training_examples(set, i as u64)?);
    }
    Ok(out)
}

/// One example per model for a single sample set, tagged with `sample_id`.
pub fn training_examples(set: &SampleSet, sample_id: u64) -> Result<Vec<TrainingExample>> {
    let named = |e: Error| Error::Dataset(format!("sample {:?}: {e}", set.image_id));
    let mut single = Vec::with_capacity(4);
    for m in ModelId::ALL {
        single.push(set.heads(AugKind::Identity, 0, m).map_err(named)?);
    }
    let mut ious = [0.0; 4];
    for (m, heads) in ModelId::ALL.iter().zip(&single) {
        ious[m.index()] = best_iou(set, heads).map_err(named)?;
    }
    let mut out = Vec::with_capacity(4);
    for (m, heads) in ModelId::ALL.iter().zip(&single) {
        let refined = set.refined_heads(*m).map_err(named)?;
        let sel = sam_selected(heads);
        let tokens = heads[sel].tokens.clone();
        if tokens.len() != TOKEN_DIM {
            return Err(named(Error::LengthMismatch(tokens.len(), TOKEN_DIM)));
        }
        out.push(TrainingExample {
            sample_id,
            source: *m,
            tokens,
            iou: ious,
            iou_refined: best_iou(set, &refined).map_err(named)?,
            iou_sam_selected: iou(&heads[sel].mask.to_binary(), &set.gt).map_err(named)?,
        });
    }
    Ok(out)
}

pub fn token_matrix(examples: &[TrainingExample]) -> Array2<f64> {
    let mut flat = Vec::with_capacity(examples.len() * TOKEN_DIM);
    for e in examples {
        flat.extend_from_slice(&e.tokens);
    }
    Array2::from_shape_vec((examples.len(), TOKEN_DIM), flat).expect("token rows")
}

pub fn head_dataset(examples: &[TrainingExample], kind: HeadKind) -> Result<Dataset> {
    Dataset::new(token_matrix(examples), examples.iter().map(|e| e.target(kind)).collect())
}

/// Trained heads; absent heads report [`Error::Untrained`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UsamHeads {
    heads: BTreeMap<HeadKind, MlpParams>,
    configs: BTreeMap<HeadKind, TrainConfig>,
    losses: BTreeMap<HeadKind, Vec<f64>>,
}

impl UsamHeads {
    pub fn insert(&mut self, kind: HeadKind, params: MlpParams) {
        self.heads.insert(kind, params);
    }

    pub fn kinds(&self) -> impl Iterator<Item = HeadKind> + '_ {
        self.heads.keys().copied()
    }

    pub fn config(&self, kind: HeadKind) -> Option<&TrainConfig> {
        self.configs.get(&kind)
    }

    pub fn losses(&self, kind: HeadKind) -> Option<&[f64]> {
        self.losses.get(&kind).map(Vec::as_slice)
    }

    pub fn get(&self, kind: HeadKind) -> Result<&MlpParams> {
        self.heads.get(&kind).ok_or_else(|| Error::Untrained(kind.name()))
    }

    pub fn raw(&self, kind: HeadKind, tokens: &[f64]) -> Result<f64> {
        mlp_forward(self.get(kind)?, tokens)
    }

    /// `1 − USAM_θ(l)`.
    pub fn predictive_uncertainty(&self, tokens: &[f64], source: ModelId) -> Result<UncScore> {
        UncScore::new(1.0 - self.raw(HeadKind::Model(source), tokens)?, Method::UsamPredictive)
    }

    /// `USAM_L(l) − USAM_T(l)`.
    pub fn delta_model(&self, tokens: &[f64]) -> Result<f64> {
        Ok(self.raw(HeadKind::Model(ModelId::L), tokens)? - self.raw(HeadKind::Model(ModelId::T), tokens)?)
    }

    /// `USAM_x*(l) − USAM_θ(l)`.
    pub fn delta_prompt(&self, tokens: &[f64], source: ModelId) -> Result<f64> {
        Ok(self.raw(HeadKind::RefinedPrompt, tokens)? - self.raw(HeadKind::Model(source), tokens)?)
    }

    /// `USAM_θ(l) − USAM_SAM(l)`.
    pub fn delta_task(&self, tokens: &[f64], source: ModelId) -> Result<f64> {
        Ok(self.raw(HeadKind::Model(source), tokens)? - self.raw(HeadKind::SamSelected, tokens)?)
    }

    /// `2·Δ*(l) − 1` for a direct head.
    pub fn direct_delta(&self, kind: HeadKind, tokens: &[f64]) -> Result<f64> {
        if !kind.is_direct() {
            return Err(Error::InvalidConfig(format!("{kind} is not a direct head")));
        }
        Ok(2.0 * self.raw(kind, tokens)? - 1.0)
    }

    fn batch(&self, kind: HeadKind, tokens: &Array2<f64>) -> Result<Vec<f64>> {
        predict(self.get(kind)?, tokens.view())
    }

    /// Scores of a USAM-derived `method` for examples that share one source
    /// model.
    pub fn method_scores(&self, method: Method, examples: &[TrainingExample]) -> Result<MethodScores> {
        let Some(source) = examples.first().map(|e| e.source) else {
            return Ok(MethodScores::new(method, vec![]));
        };
        if examples.iter().any(|e| e.source != source) {
            return Err(Error::InvalidConfig("mixed token sources".into()));
        }
        let x = token_matrix(examples);
        let diff = |a: HeadKind, b: HeadKind| -> Result<Vec<f64>> {
            let (a, b) = (self.batch(a, &x)?, self.batch(b, &x)?);
            Ok(a.iter().zip(&b).map(|(a, b)| a - b).collect())
        };
        let affine = |k: HeadKind| -> Result<Vec<f64>> {
            Ok(self.batch(k, &x)?.iter().map(|o| 2.0 * o - 1.0).collect())
        };
        let values = match method {
            Method::UsamPredictive => self
                .batch(HeadKind::Model(source), &x)?
                .iter()
                .map(|o| 1.0 - o)
                .collect(),
            Method::DeltaModel => diff(HeadKind::Model(ModelId::L), HeadKind::Model(ModelId::T))?,
            Method::DeltaPrompt => diff(HeadKind::RefinedPrompt, HeadKind::Model(source))?,
            Method::DeltaTask => diff(HeadKind::Model(source), HeadKind::SamSelected)?,
            Method::DirectDeltaModel => affine(HeadKind::DirectModel)?,
            Method::DirectDeltaPrompt => affine(HeadKind::DirectPrompt)?,
            Method::DirectDeltaTask => affine(HeadKind::DirectTask)?,
            other => return Err(Error::InvalidConfig(format!("{other} is not a USAM method"))),
        };
        Ok(MethodScores::new(method, values))
    }
}

/// Trains each listed head on its own target, with a per-head seed derived
/// from `cfg.seed`.
pub fn train_heads(examples: &[TrainingExample], kinds: &[HeadKind], cfg: &TrainConfig) -> Result<UsamHeads> {
    if examples.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let x = token_matrix(examples);
    let mut heads = UsamHeads::default();
    for &kind in kinds {
        let data = Dataset::new(x.clone(), examples.iter().map(|e| e.target(kind)).collect())?;
        let head_cfg = TrainConfig {
            seed: seed::derive(&[cfg.seed, kind.seed_tag()]),
            ..*cfg
        };
        let fit = mlp::train(&data, &head_cfg)?;
        heads.heads.insert(kind, fit.params);
        heads.configs.insert(kind, head_cfg);
        heads.losses.insert(kind, fit.losses);
    }
    Ok(heads)
}

/// Which token half to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    MaskToken,
    IouToken,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::None, Ablation::MaskToken, Ablation::IouToken];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::MaskToken => "mask_token",
            Ablation::IouToken => "iou_token",
        }
    }

    pub fn apply(self, examples: &[TrainingExample]) -> Vec<TrainingExample> {
        let range = match self {
            Ablation::None => return examples.to_vec(),
            Ablation::MaskToken => MASK_TOKEN,
            Ablation::IouToken => IOU_TOKEN,
        };
        examples
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.tokens[range.clone()].iter_mut().for_each(|v| *v = 0.0);
                e
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub zero: Ablation,
    /// Rel-AUC of each scenario's direct head, in [`ABLATION_SCENARIOS`]
    /// order.
    pub rel_auc: Vec<(Scenario, f64)>,
}

pub const ABLATION_SCENARIOS: [Scenario; 3] =
    [Scenario::ModelSwap, Scenario::PromptRefine, Scenario::TaskSupervise];

/// Zeroes one token half in every example, retrains with `train_fn` and
/// scores the direct heads on `test` examples from `eval_model`.
pub fn token_ablation(
    train_fn: impl Fn(&[TrainingExample]) -> Result<UsamHeads>,
    train: &[TrainingExample],
    test: &[TrainingExample],
    zero: Ablation,
    eval_model: ModelId,
) -> Result<AblationReport> {
    let heads = train_fn(&zero.apply(train))?;
    let test: Vec<TrainingExample> = zero
        .apply(test)
        .into_iter()
        .filter(|e| e.source == eval_model)
        .collect();
    let outcomes: Vec<Outcome> = test.iter().map(TrainingExample::outcome).collect();
    let mut rel_auc = Vec::new();
    for scenario in ABLATION_SCENARIOS {
        let scores = heads.method_scores(scenario.direct_method(), &test)?;
        let report = evaluate(&outcomes, &[scores], scenario)?;
        rel_auc.push((scenario, report.curves[0].1.rel_auc));
    }
    Ok(AblationReport { zero, rel_auc })
}

/// Scores every requested method on test examples from one source model.
/// USAM methods need the matching heads; `random` uses `seed`.
pub fn score_methods(
    heads: &UsamHeads,
    test: &[TrainingExample],
    methods: &[Method],
    seed: u64,
) -> Result<Vec<MethodScores>> {
    methods
        .iter()
        .map(|&m| match m {
            Method::Random => Ok(random_scores(test.len(), seed)),
            _ => heads.method_scores(m, test),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub token_layout_version: u32,
    pub token_dim: usize,
    /// Head name → checkpoint file name, relative to the bundle directory.
    pub heads: BTreeMap<String, String>,
    pub configs: BTreeMap<String, TrainConfig>,
}

pub const MANIFEST_FILE: &str = "heads.json";

/// Writes one checkpoint per head plus a JSON manifest into `dir`.
pub fn save_bundle(dir: &Path, heads: &UsamHeads) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = BundleManifest {
        token_layout_version: TOKEN_LAYOUT_VERSION,
        token_dim: TOKEN_DIM,
        heads: BTreeMap::new(),
        configs: BTreeMap::new(),
    };
    for (kind, params) in &heads.heads {
        let file = format!("{}.mlp", kind.name());
        mlp::save(&dir.join(&file), params)?;
        manifest.heads.insert(kind.name(), file);
        if let Some(c) = heads.configs.get(kind) {
            manifest.configs.insert(kind.name(), *c);
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(dir: &Path) -> Result<UsamHeads> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text)?;
    if manifest.token_layout_version != TOKEN_LAYOUT_VERSION || manifest.token_dim != TOKEN_DIM {
        return Err(Error::Checkpoint {
            path,
            message: format!(
                "token layout v{} ({} dims) is not supported",
                manifest.token_layout_version, manifest.token_dim
            ),
        });
    }
    let mut heads = UsamHeads::default();
    for (name, file) in &manifest.heads {
        let kind: HeadKind = name.parse()?;
        let params = mlp::load(&dir.join(file))?;
        if params.dims().input != TOKEN_DIM {
            return Err(Error::Checkpoint {
                path: dir.join(file),
                message: format!("input dimension {} != {TOKEN_DIM}", params.dims().input),
            });
        }
        heads.heads.insert(kind, params);
        if let Some(c) = manifest.configs.get(name) {
            heads.configs.insert(kind, *c);
        }
    }
    Ok(heads)
}
