//! Correction-curve evaluation, Pearson correlation and the runtime
//! micro-benchmark.
//!
//! A correction curve answers: if the `k` most uncertain of `n` samples are
//! replaced by a better prediction, what is the mean IoU? Curves are
//! evaluated at every `k/n` and integrated with the trapezoid rule; rel-AUC
//! rescales the area between the worst and the best possible orderings.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{SegmentationBackend, SyntheticSam, SyntheticWorld};
use crate::error::{Error, Result};
use crate::mask::{mean_mask_entropy, BinaryMask, Method, ProbMask, UncScore};
use crate::mlp::{mlp_forward, MlpDims, MlpParams};
use crate::sampling::{apply_augmentation, centroid_prompt, AugKind, ModelId};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub sample_id: u64,
    pub base_iou: f64,
    pub corrected_iou: f64,
    pub unc: UncScore,
}

impl ScoredSample {
    fn gain(&self) -> f64 {
        self.corrected_iou - self.base_iou
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCurve {
    pub ratios: Vec<f64>,
    pub mious: Vec<f64>,
    pub oracle_mious: Vec<f64>,
    pub worst_mious: Vec<f64>,
    pub auc: f64,
    pub oracle_auc: f64,
    pub worst_auc: f64,
    pub rel_auc: f64,
}

/// mIoU after correcting each prefix of `order`, given the per-sample gains
/// in that order. Endpoints are summed in id order so that they do not
/// depend on the ordering at all.
fn curve_for(gains: &[f64], base_sum: f64, corrected_sum: f64) -> Vec<f64> {
    let n = gains.len();
    let mut out = Vec::with_capacity(n + 1);
    out.push(base_sum / n as f64);
    let mut acc = base_sum;
    for &g in &gains[..n - 1] {
        acc += g;
        out.push(acc / n as f64);
    }
    out.push(corrected_sum / n as f64);
    out
}

fn trapezoid(ys: &[f64]) -> f64 {
    let n = (ys.len() - 1) as f64;
    let inner: f64 = ys[1..ys.len() - 1].iter().sum();
    (inner + 0.5 * (ys[0] + ys[ys.len() - 1])) / n
}

/// Curve of a method's ordering together with the oracle and worst
/// envelopes.
pub fn correction_curve(samples: &[ScoredSample]) -> Result<CorrectionCurve> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mut by_id: Vec<&ScoredSample> = samples.iter().collect();
    by_id.sort_by_key(|s| s.sample_id);
    if by_id.windows(2).any(|w| w[0].sample_id == w[1].sample_id) {
        return Err(Error::InvalidSampleSet("duplicate sample ids".into()));
    }
    for s in &by_id {
        for v in [s.base_iou, s.corrected_iou] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain { what: "iou", value: v });
            }
        }
    }
    let base_sum: f64 = by_id.iter().map(|s| s.base_iou).sum();
    let corrected_sum: f64 = by_id.iter().map(|s| s.corrected_iou).sum();

    let ordered = |key: &dyn Fn(&ScoredSample, &ScoredSample) -> std::cmp::Ordering| {
        let mut v = by_id.clone();
        v.sort_by(|a, b| key(a, b).then(a.sample_id.cmp(&b.sample_id)));
        let gains: Vec<f64> = v.iter().map(|s| s.gain()).collect();
        curve_for(&gains, base_sum, corrected_sum)
    };
    let mious = ordered(&|a, b| b.unc.value().total_cmp(&a.unc.value()));
    let oracle_mious = ordered(&|a, b| b.gain().total_cmp(&a.gain()));
    let worst_mious = ordered(&|a, b| a.gain().total_cmp(&b.gain()));

    let auc = trapezoid(&mious);
    // the envelopes bound every ordering; max/min absorbs summation-order ulps
    let oracle_auc = trapezoid(&oracle_mious).max(auc);
    let worst_auc = trapezoid(&worst_mious).min(auc);
    let rel_auc = if oracle_auc == worst_auc {
        1.0
    } else {
        (auc - worst_auc) / (oracle_auc - worst_auc)
    };
    Ok(CorrectionCurve {
        ratios: (0..=n).map(|k| k as f64 / n as f64).collect(),
        mious,
        oracle_mious,
        worst_mious,
        auc,
        oracle_auc,
        worst_auc,
        rel_auc,
    })
}

/// Standard sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("xs"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("ys"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric matrix of pairwise correlations; `None` marks a cell where a
/// column has zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

pub const UNDEFINED: &str = "NA";

pub fn correlation_matrix(columns: &[(String, Vec<f64>)]) -> Result<CorrelationMatrix> {
    let k = columns.len();
    if let Some((_, first)) = columns.first() {
        for (name, c) in columns {
            if c.len() != first.len() {
                return Err(Error::InvalidSampleSet(format!(
                    "column {name} has {} rows, expected {}",
                    c.len(),
                    first.len()
                )));
            }
        }
    }
    let mut values = vec![vec![None; k]; k];
    for i in 0..k {
        values[i][i] = Some(1.0);
        for j in i + 1..k {
            let r = match pearson(&columns[i].1, &columns[j].1) {
                Ok(r) => Some(r),
                Err(Error::ZeroVariance(_)) => None,
                Err(e) => {
                    return Err(Error::InvalidSampleSet(format!(
                        "cell ({}, {}): {e}",
                        columns[i].0, columns[j].0
                    )))
                }
            };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        names: columns.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.values[i][j]
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![String::new()];
        header.extend(self.names.iter().cloned());
        out.write_record(&header)?;
        for (name, row) in self.names.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| match v {
                Some(r) => format!("{r:.6}"),
                None => UNDEFINED.to_string(),
            }));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// What replaces a sample's prediction when it is selected for correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Re-predict with the Large model.
    ModelSwap,
    /// Re-predict with the refined multi-point prompt.
    PromptRefine,
    /// Replace the SamScore-selected proposal with the best-fitting one.
    TaskSupervise,
    /// Replace the prediction with the ground truth.
    GtCorrect,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::ModelSwap,
        Scenario::PromptRefine,
        Scenario::TaskSupervise,
        Scenario::GtCorrect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::ModelSwap => "model-swap",
            Scenario::PromptRefine => "prompt-refine",
            Scenario::TaskSupervise => "task-supervise",
            Scenario::GtCorrect => "gt-correct",
        }
    }

    /// The learned quantity that targets this scenario's gain.
    pub fn direct_method(self) -> Method {
        match self {
            Scenario::ModelSwap => Method::DirectDeltaModel,
            Scenario::PromptRefine => Method::DirectDeltaPrompt,
            Scenario::TaskSupervise => Method::DirectDeltaTask,
            Scenario::GtCorrect => Method::UsamPredictive,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario {s:?}")))
    }
}

/// Per-sample IoUs that every scenario draws its before/after values from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub sample_id: u64,
    /// Best-head IoU of the evaluated model at the single prompt.
    pub iou_best: f64,
    /// Best-head IoU of the Large model at the single prompt.
    pub iou_large: f64,
    /// Best-head IoU of the evaluated model at the refined prompt.
    pub iou_refined: f64,
    /// IoU of the evaluated model's highest-SamScore proposal.
    pub iou_selected: f64,
}

impl Outcome {
    /// `(base_iou, corrected_iou)` under a scenario.
    pub fn pair(&self, scenario: Scenario) -> (f64, f64) {
        match scenario {
            Scenario::ModelSwap => (self.iou_best, self.iou_large),
            Scenario::PromptRefine => (self.iou_best, self.iou_refined),
            Scenario::TaskSupervise => (self.iou_selected, self.iou_best),
            Scenario::GtCorrect => (self.iou_best, 1.0),
        }
    }
}

/// Uncertainty values for one method, aligned with a list of outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScores {
    pub name: String,
    pub method: Method,
    pub values: Vec<f64>,
}

impl MethodScores {
    pub fn new(method: Method, values: Vec<f64>) -> Self {
        Self {
            name: method.name().to_string(),
            method,
            values,
        }
    }
}

/// Seeded uniform scores: the chance baseline.
pub fn random_scores(n: usize, seed: u64) -> MethodScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[seed, 0x4A4D]));
    MethodScores::new(Method::Random, (0..n).map(|_| rng.random::<f64>()).collect())
}

pub fn scored_samples(outcomes: &[Outcome], scores: &MethodScores, scenario: Scenario) -> Result<Vec<ScoredSample>> {
    if outcomes.len() != scores.values.len() {
        return Err(Error::LengthMismatch(outcomes.len(), scores.values.len()));
    }
    outcomes
        .iter()
        .zip(&scores.values)
        .map(|(o, &v)| {
            let (base_iou, corrected_iou) = o.pair(scenario);
            Ok(ScoredSample {
                sample_id: o.sample_id,
                base_iou,
                corrected_iou,
                unc: UncScore::new(v, scores.method)?,
            })
        })
        .collect()
}

/// Curves of several methods under one scenario, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub curves: Vec<(String, CorrectionCurve)>,
}

pub fn evaluate(outcomes: &[Outcome], methods: &[MethodScores], scenario: Scenario) -> Result<ScenarioReport> {
    let curves = methods
        .iter()
        .map(|m| Ok((m.name.clone(), correction_curve(&scored_samples(outcomes, m, scenario)?)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioReport { scenario, curves })
}

impl ScenarioReport {
    pub fn rel_auc(&self, name: &str) -> Option<f64> {
        self.curves.iter().find(|(n, _)| n == name).map(|(_, c)| c.rel_auc)
    }

    /// `ratio,<methods>,oracle,worst`, one row per grid point.
    pub fn write_curves_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["ratio".to_string()];
        header.extend(self.curves.iter().map(|(n, _)| n.clone()));
        header.extend(["oracle".to_string(), "worst".to_string()]);
        out.write_record(&header)?;
        let Some((_, first)) = self.curves.first() else {
            return out.flush().map_err(|e| Error::io("<csv>", e));
        };
        for (k, ratio) in first.ratios.iter().enumerate() {
            let mut rec = vec![format!("{ratio:.6}")];
            rec.extend(self.curves.iter().map(|(_, c)| format!("{:.8}", c.mious[k])));
            rec.push(format!("{:.8}", first.oracle_mious[k]));
            rec.push(format!("{:.8}", first.worst_mious[k]));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// `method,rel_auc` with rel-AUC in percent to two decimals, plus the
    /// oracle (100.00) and worst (0.00) rows.
    pub fn write_rel_auc_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "rel_auc"])?;
        for (n, c) in &self.curves {
            out.write_record([n.clone(), format!("{:.2}", 100.0 * c.rel_auc)])?;
        }
        out.write_record(["oracle", "100.00"])?;
        out.write_record(["worst", "0.00"])?;
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Median wall times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mask_size: usize,
    pub repeats: usize,
    pub usam_head: f64,
    pub mean_entropy: f64,
    pub single_inference: f64,
    pub mc_loop: f64,
    /// Raw timings per measurement, `repeats` each.
    pub samples: Vec<(String, Vec<f64>)>,
}

impl BenchReport {
    pub fn mc_over_single(&self) -> f64 {
        self.mc_loop / self.single_inference
    }

    pub fn entropy_over_usam(&self) -> f64 {
        self.mean_entropy / self.usam_head
    }
}

/// Number of augmentations in the simulated Monte-Carlo loop.
pub const MC_AUGMENTATIONS: usize = 5;

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        out.push(Duration::as_secs_f64(&t.elapsed()));
    }
    Ok(out)
}

/// Times USAM head inference on one token, the mean mask entropy of a
/// `mask_size²` prediction, one synthetic forward pass at that resolution
/// and a loop of [`MC_AUGMENTATIONS`] augmented forward passes.
pub fn bench_uq_overhead(mask_size: usize, repeats: usize) -> Result<BenchReport> {
    if repeats < 10 {
        return Err(Error::Domain {
            what: "repeats",
            value: repeats as f64,
        });
    }
    let world = SyntheticWorld {
        image_size: (mask_size, mask_size),
        ..SyntheticWorld::default()
    };
    let sam = SyntheticSam::new(world)?;
    let sample = sam.sample(0)?;
    let backend = sam.scene(&sample);
    let prompt = centroid_prompt(&sample.gt)?;

    let head = MlpParams::init(MlpDims::default(), 1);
    let token = backend.forward(&sample.image, &prompt, ModelId::T)?.tokens[0].clone();
    let mask: ProbMask = backend.forward(&sample.image, &prompt, ModelId::T)?.masks[0].clone();
    let binary: BinaryMask = mask.to_binary();

    let mut sink = 0.0;
    let usam = time(repeats, || {
        sink += mlp_forward(&head, std::hint::black_box(&token))?;
        Ok(())
    })?;
    let entropy = time(repeats, || {
        sink += mean_mask_entropy(std::hint::black_box(&mask), &binary)?.value();
        Ok(())
    })?;
    let single = time(repeats, || {
        sink += backend.forward(&sample.image, &prompt, ModelId::T)?.sam_scores[0];
        Ok(())
    })?;
    let augs = &AugKind::ALL[1..=MC_AUGMENTATIONS];
    let mc = time(repeats, || {
        for (i, &aug) in augs.iter().enumerate() {
            let img = apply_augmentation(&sample.image, aug, i as u64)?;
            let p = if aug.is_geometric() {
                prompt.flip_rows(img.height())
            } else {
                prompt.clone()
            };
            sink += backend.forward(&img, &p, ModelId::T)?.sam_scores[0];
        }
        Ok(())
    })?;
    std::hint::black_box(sink);

    let mut samples = vec![
        ("usam_head".to_string(), usam),
        ("mean_entropy".to_string(), entropy),
        ("single_inference".to_string(), single),
        ("mc_loop".to_string(), mc),
    ];
    let mut med = samples.iter_mut().map(|(_, v)| median(&mut v.clone()));
    Ok(BenchReport {
        mask_size,
        repeats,
        usam_head: med.next().expect("4"),
        mean_entropy: med.next().expect("4"),
        single_inference: med.next().expect("4"),
        mc_loop: med.next().expect("4"),
        samples,
    })
}
