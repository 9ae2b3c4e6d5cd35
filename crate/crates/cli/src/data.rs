//! Per-sample rows streamed out of record files: USAM training examples
//! plus the sampling-based baseline scores.

use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use usamkit::bayes::{epistemic_entropy, predictive_entropy, prompt_entropy, task_entropy, SampleSet};
use usamkit::eval::MethodScores;
use usamkit::io::RecordReader;
use usamkit::mask::{mean_mask_entropy, Method};
use usamkit::sampling::{AugKind, ModelId};
use usamkit::usam::{sam_selected, training_examples, TrainingExample};

/// Sampling-based uncertainty of one sample for the evaluated model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baselines {
    /// Needs the full augmentation grid.
    pub h_y: Option<f64>,
    pub h_theta: f64,
    pub h_xp: f64,
    pub h_a: f64,
    pub h_std: f64,
    pub sam_score: f64,
}

impl Baselines {
    /// `1 − SamScore`, clipped to `[0, 1]`.
    pub fn inv_sam_score(&self) -> f64 {
        (1.0 - self.sam_score).clamp(0.0, 1.0)
    }
}

pub fn baselines(set: &SampleSet, model: ModelId) -> usamkit::Result<Baselines> {
    let h_y = if set.has_full_grid() {
        Some(predictive_entropy(set)?.value())
    } else {
        None
    };
    let heads = set.heads(AugKind::Identity, 0, model)?;
    let sel = heads[sam_selected(&heads)];
    Ok(Baselines {
        h_y,
        h_theta: epistemic_entropy(set, 0, &set.gt)?.value(),
        h_xp: prompt_entropy(set, model, &set.gt)?.value(),
        h_a: task_entropy(set, 0, model)?.value(),
        h_std: mean_mask_entropy(&sel.mask, &sel.mask.to_binary())?.value(),
        sam_score: sel.sam_score,
    })
}

#[derive(Debug, Clone)]
pub struct SampleRow {
    pub sample_id: u64,
    pub image_id: String,
    /// One per source model, in [`ModelId::ALL`] order, or none.
    pub examples: Vec<TrainingExample>,
    pub baselines: Option<Baselines>,
}

impl SampleRow {
    pub fn example(&self, model: ModelId) -> &TrainingExample {
        &self.examples[model.index()]
    }
}

const CHUNK: usize = 64;

/// Reads every sample set of `path`. Sample ids are line positions.
/// Training examples need tokens and refined records; baselines, computed
/// for `baseline_model` when given, need neither.
pub fn load_rows(path: &Path, examples: bool, baseline_model: Option<ModelId>) -> Result<Vec<SampleRow>> {
    let reader = RecordReader::open(path)?;
    let mut rows = Vec::new();
    let mut chunk: Vec<SampleSet> = Vec::with_capacity(CHUNK);
    let flush = |chunk: &mut Vec<SampleSet>, rows: &mut Vec<SampleRow>| -> Result<()> {
        let first = rows.len() as u64;
        let done: Vec<Result<SampleRow>> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, set)| row(set, first + i as u64, examples, baseline_model))
            .collect();
        chunk.clear();
        for r in done {
            rows.push(r?);
        }
        Ok(())
    };
    for set in reader {
        chunk.push(set?);
        if chunk.len() == CHUNK {
            flush(&mut chunk, &mut rows)?;
        }
    }
    flush(&mut chunk, &mut rows)?;
    anyhow::ensure!(!rows.is_empty(), "{} holds no sample sets", path.display());
    Ok(rows)
}

fn row(set: &SampleSet, sample_id: u64, examples: bool, baseline_model: Option<ModelId>) -> Result<SampleRow> {
    let mut examples = if examples {
        training_examples(set, sample_id)?
    } else {
        Vec::new()
    };
    examples.sort_by_key(|e| e.source.index());
    let baselines = baseline_model
        .map(|m| baselines(set, m))
        .transpose()
        .with_context(|| format!("baselines for sample {:?}", set.image_id))?;
    Ok(SampleRow {
        sample_id,
        image_id: set.image_id.clone(),
        examples,
        baselines,
    })
}

pub fn all_examples(rows: &[SampleRow]) -> Vec<TrainingExample> {
    rows.iter().flat_map(|r| r.examples.iter().cloned()).collect()
}

pub fn model_examples(rows: &[SampleRow], model: ModelId) -> Vec<TrainingExample> {
    rows.iter().map(|r| r.example(model).clone()).collect()
}

/// Baseline score columns in a fixed order. `H_Y` is included only when
/// every row has it.
pub fn baseline_scores(rows: &[SampleRow]) -> Result<Vec<MethodScores>> {
    let b: Vec<&Baselines> = rows
        .iter()
        .map(|r| r.baselines.as_ref().context("baselines were not computed"))
        .collect::<Result<_>>()?;
    let col = |m: Method, f: &dyn Fn(&Baselines) -> f64| MethodScores::new(m, b.iter().map(|x| f(x)).collect());
    let mut out = vec![
        col(Method::InverseSamScore, &|x| x.inv_sam_score()),
        col(Method::MeanMaskEntropy, &|x| x.h_std),
    ];
    if b.iter().all(|x| x.h_y.is_some()) {
        out.push(col(Method::PredictiveEntropy, &|x| x.h_y.unwrap_or(0.0)));
    }
    out.push(col(Method::EpistemicEntropy, &|x| x.h_theta));
    out.push(col(Method::PromptEntropy, &|x| x.h_xp));
    out.push(col(Method::TaskEntropy, &|x| x.h_a));
    Ok(out)
}
