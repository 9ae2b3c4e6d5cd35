//! One function per subcommand. Each writes its manifest first, then its
//! outputs, then marks the manifest complete.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use usamkit::backend::SyntheticSam;
use usamkit::bayes::{build_sample_set, GridSpec};
use usamkit::eval::{bench_uq_overhead, correlation_matrix, evaluate, random_scores, MethodScores, Outcome, Scenario};
use usamkit::io::{rle_encode, RecordReader, RecordWriter, RleMask};
use usamkit::mask::Method;
use usamkit::mlp::{random_search, TrainConfig};
use usamkit::sampling::{AugKind, ModelId};
use usamkit::seed;
use usamkit::usam::{
    head_dataset, load_bundle, sam_selected, save_bundle, token_ablation, train_heads, Ablation, HeadKind,
    TrainingExample, UsamHeads, ABLATION_SCENARIOS, MANIFEST_FILE as HEADS_FILE,
};

use crate::data::{all_examples, baseline_scores, load_rows, model_examples, SampleRow};
use crate::manifest::{manifest_path, RunManifest};
use crate::svg::line_plot;
use crate::{usage, AblateArgs, BayesArgs, BenchArgs, CorrelateArgs, EvalArgs, ExportArgs, GenerateArgs, GridKind, TrainArgs};

const GENERATE_CHUNK: usize = 32;

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn csv_out(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn tagged<T: Serialize>(args: &T, seed: u64) -> serde_json::Value {
    serde_json::json!({ "seed": seed, "args": args })
}

pub fn generate(a: &GenerateArgs, seed: u64) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if a.prompts == 0 {
        return Err(usage("--prompts must be at least 1"));
    }
    let world = a.world.build(seed)?;
    let grid = match a.grid {
        GridKind::Full => GridSpec::full(a.prompts),
        GridKind::Identity => GridSpec::identity(a.prompts),
    };
    let config = serde_json::json!({ "seed": seed, "args": a, "world": world });
    let mut manifest = RunManifest::new("generate", &config, seeds(&[("world", world.seed)]))?;
    manifest.outputs.push(a.out.clone());
    let mpath = manifest_path(&a.out, false);
    manifest.begin(&mpath)?;

    let sam = SyntheticSam::new(world.clone())?;
    let ids: Vec<u64> = (a.first..a.first + a.n as u64).collect();
    let mut writer = RecordWriter::new(create(&a.out)?)?;
    for chunk in ids.chunks(GENERATE_CHUNK) {
        let sets: Vec<_> = chunk
            .par_iter()
            .map(|&i| {
                let s = sam.sample(i)?;
                build_sample_set(
                    &sam.scene(&s),
                    format!("syn-{i:07}"),
                    &s.image,
                    &s.gt,
                    &grid,
                    seed::derive(&[world.seed, i]),
                )
            })
            .collect::<usamkit::Result<_>>()?;
        for s in &sets {
            writer.write(s)?;
        }
    }
    writer.finish()?;

    let lines = BufReader::new(File::open(&a.out)?).lines().count();
    anyhow::ensure!(lines == a.n + 1, "{} has {lines} lines, expected {}", a.out.display(), a.n + 1);
    manifest.finish(&mpath)
}

/// Shortest representation that parses back to the same `f64`.
fn exact(v: f64) -> String {
    format!("{v}")
}

pub fn bayes(a: &BayesArgs, seed: u64) -> Result<()> {
    let mut manifest = RunManifest::new("bayes", &tagged(a, seed), seeds(&[]))?;
    manifest.inputs.push(a.records.clone());
    manifest.outputs.push(a.out.clone());
    let mpath = manifest_path(&a.out, false);
    manifest.begin(&mpath)?;

    let rows = load_rows(&a.records, false, Some(a.model))?;
    let mut w = csv_out(&a.out)?;
    w.write_record(["sample_id", "image_id", "H_Y", "H_Theta", "H_XP", "H_A", "H_Std", "inv_SamScore"])?;
    for r in &rows {
        let b = r.baselines.as_ref().expect("requested");
        w.write_record([
            r.sample_id.to_string(),
            r.image_id.clone(),
            b.h_y.map_or_else(|| usamkit::eval::UNDEFINED.to_string(), exact),
            exact(b.h_theta),
            exact(b.h_xp),
            exact(b.h_a),
            exact(b.h_std),
            exact(b.inv_sam_score()),
        ])?;
    }
    w.flush()?;
    manifest.finish(&mpath)
}

fn parse_kinds(names: &Option<Vec<String>>) -> Result<Vec<HeadKind>> {
    let Some(names) = names else {
        return Ok(HeadKind::ALL.to_vec());
    };
    let mut kinds = Vec::new();
    for n in names {
        let k: HeadKind = n.parse().map_err(|e: usamkit::Error| usage(e.to_string()))?;
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        return Err(usage("--kinds is empty"));
    }
    Ok(kinds)
}

pub fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let kinds = parse_kinds(&a.kinds)?;
    let flags_cfg = match a.search {
        Some(0) => return Err(usage("--search needs at least one trial")),
        Some(_) => None,
        None => Some(a.train.config(seed)?),
    };
    let mut manifest = RunManifest::new("train", &tagged(a, seed), seeds(&[("train", seed)]))?;
    manifest.inputs.push(a.records.clone());
    let mpath = manifest_path(&a.heads, true);
    manifest.begin(&mpath)?;

    let rows = load_rows(&a.records, true, None)?;
    let examples = all_examples(&rows);
    let cfg = match (flags_cfg, a.search) {
        (Some(c), _) => c,
        (None, Some(trials)) => {
            let data = head_dataset(&examples, HeadKind::Model(ModelId::T))?;
            let found = random_search(&data, trials, seed)?;
            let path = a.heads.join("search.csv");
            let mut w = csv_out(&path)?;
            w.write_record(["trial", "epochs", "batch_size", "learning_rate", "momentum", "weight_decay", "val_mse"])?;
            for (t, (c, loss)) in found.trials.iter().enumerate() {
                w.write_record([
                    t.to_string(),
                    c.epochs.to_string(),
                    c.batch_size.to_string(),
                    exact(c.learning_rate),
                    exact(c.momentum),
                    exact(c.weight_decay),
                    exact(*loss),
                ])?;
            }
            w.flush()?;
            manifest.outputs.push(path);
            TrainConfig { seed, ..found.best }
        }
        (None, None) => unreachable!("config or search"),
    };
    let heads = train_heads(&examples, &kinds, &cfg)?;
    save_bundle(&a.heads, &heads)?;
    manifest.outputs.push(a.heads.join(HEADS_FILE));
    for k in &kinds {
        manifest.outputs.push(a.heads.join(format!("{}.mlp", k.name())));
    }

    let path = a.heads.join("losses.csv");
    let mut w = csv_out(&path)?;
    w.write_record(["head", "epoch", "loss"])?;
    for k in &kinds {
        for (e, l) in heads.losses(*k).unwrap_or_default().iter().enumerate() {
            w.write_record([k.name(), (e + 1).to_string(), exact(*l)])?;
        }
    }
    w.flush()?;
    manifest.outputs.push(path);
    manifest.finish(&mpath)
}

const USAM_METHODS: [Method; 7] = [
    Method::UsamPredictive,
    Method::DeltaModel,
    Method::DeltaPrompt,
    Method::DeltaTask,
    Method::DirectDeltaModel,
    Method::DirectDeltaPrompt,
    Method::DirectDeltaTask,
];

/// USAM methods whose heads are all present in the bundle.
fn usam_scores(heads: &UsamHeads, test: &[TrainingExample], model: ModelId) -> Result<Vec<MethodScores>> {
    let have: Vec<HeadKind> = heads.kinds().collect();
    let mut out = Vec::new();
    for m in USAM_METHODS {
        if HeadKind::required_for(m, model).iter().all(|k| have.contains(k)) {
            out.push(heads.method_scores(m, test)?);
        }
    }
    Ok(out)
}

fn parse_scenarios(s: &str) -> Result<Vec<Scenario>> {
    if s == "all" {
        return Ok(Scenario::ALL.to_vec());
    }
    s.split(',')
        .map(|t| t.trim().parse::<Scenario>().map_err(|e| usage(e.to_string())))
        .collect()
}

pub fn eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let scenarios = parse_scenarios(&a.scenario)?;
    let mut manifest = RunManifest::new("eval", &tagged(a, seed), seeds(&[("random_baseline", seed)]))?;
    manifest.inputs.extend([a.records.clone(), a.heads.clone()]);
    let mpath = manifest_path(&a.out, true);
    manifest.begin(&mpath)?;

    let heads = load_bundle(&a.heads)?;
    let rows = load_rows(&a.records, true, Some(a.model))?;
    let test = model_examples(&rows, a.model);
    let outcomes: Vec<Outcome> = test.iter().map(TrainingExample::outcome).collect();
    let mut methods = vec![random_scores(test.len(), seed)];
    methods.extend(baseline_scores(&rows)?);
    methods.extend(usam_scores(&heads, &test, a.model)?);

    for sc in scenarios {
        let report = evaluate(&outcomes, &methods, sc)?;
        let curves = a.out.join(format!("curves_{sc}.csv"));
        write_with(&curves, |w| Ok(report.write_curves_csv(w)?))?;
        let table = a.out.join(format!("rel_auc_{sc}.csv"));
        write_with(&table, |w| Ok(report.write_rel_auc_csv(w)?))?;
        manifest.outputs.extend([curves, table]);
        if a.svg {
            let (_, first) = &report.curves[0];
            let mut series: Vec<(String, Vec<f64>)> =
                report.curves.iter().map(|(n, c)| (n.clone(), c.mious.clone())).collect();
            series.push(("oracle".into(), first.oracle_mious.clone()));
            series.push(("worst".into(), first.worst_mious.clone()));
            let svg = line_plot(sc.as_str(), "ratio corrected", "mIoU", &first.ratios, &series);
            let path = a.out.join(format!("curves_{sc}.svg"));
            std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
            manifest.outputs.push(path);
        }
    }
    manifest.finish(&mpath)
}

pub fn correlate(a: &CorrelateArgs, seed: u64) -> Result<()> {
    let mut manifest = RunManifest::new("correlate", &tagged(a, seed), seeds(&[]))?;
    manifest.inputs.extend([a.records.clone(), a.heads.clone()]);
    manifest.outputs.push(a.out.clone());
    let mpath = manifest_path(&a.out, false);
    manifest.begin(&mpath)?;

    let heads = load_bundle(&a.heads)?;
    let rows = load_rows(&a.records, true, Some(a.model))?;
    let test = model_examples(&rows, a.model);
    let b: Vec<_> = rows.iter().map(|r| r.baselines.expect("requested")).collect();
    let mut cols: Vec<(String, Vec<f64>)> = vec![
        ("IoU_GT".into(), test.iter().map(|e| e.iou_of(a.model)).collect()),
        ("SamScore".into(), b.iter().map(|x| x.sam_score).collect()),
        ("H_Std".into(), b.iter().map(|x| x.h_std).collect()),
    ];
    if b.iter().all(|x| x.h_y.is_some()) {
        cols.push(("H_Y".into(), b.iter().map(|x| x.h_y.unwrap_or(0.0)).collect()));
    }
    cols.push(("H_Theta".into(), b.iter().map(|x| x.h_theta).collect()));
    cols.push(("H_A".into(), b.iter().map(|x| x.h_a).collect()));
    cols.push(("H_XP".into(), b.iter().map(|x| x.h_xp).collect()));
    let kind = HeadKind::Model(a.model);
    if heads.get(kind).is_ok() {
        // predicted IoU, not its complement, so it correlates positively
        let pred = heads.method_scores(Method::UsamPredictive, &test)?;
        cols.push(("USAM".into(), pred.values.iter().map(|u| 1.0 - u).collect()));
    }
    for m in [Method::DirectDeltaModel, Method::DirectDeltaPrompt, Method::DirectDeltaTask] {
        if HeadKind::required_for(m, a.model).iter().all(|k| heads.get(*k).is_ok()) {
            cols.push((m.name().into(), heads.method_scores(m, &test)?.values));
        }
    }
    let matrix = correlation_matrix(&cols)?;
    write_with(&a.out, |w| Ok(matrix.write_csv(w)?))?;
    manifest.finish(&mpath)
}

/// Seeded hold-out: a sample goes to the test side with probability
/// `fraction`, independently of file order.
fn split_rows(rows: Vec<SampleRow>, fraction: f64, seed: u64) -> (Vec<SampleRow>, Vec<SampleRow>) {
    let cut = (fraction * u64::MAX as f64) as u64;
    rows.into_iter()
        .partition(|r| seed::derive(&[seed, 0xAB1A7E, r.sample_id]) >= cut)
}

pub fn ablate(a: &AblateArgs, seed: u64) -> Result<()> {
    if a.test_records.is_none() && !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(usage("--test-fraction must lie in (0, 1)"));
    }
    let cfg = a.train.config(seed)?;
    let mut manifest = RunManifest::new("ablate", &tagged(a, seed), seeds(&[("train", seed), ("split", seed)]))?;
    manifest.inputs.push(a.records.clone());
    manifest.inputs.extend(a.test_records.clone());
    let mpath = manifest_path(&a.out, true);
    manifest.begin(&mpath)?;

    let rows = load_rows(&a.records, true, None)?;
    let (train_rows, test_rows) = match &a.test_records {
        Some(p) => (rows, load_rows(p, true, None)?),
        None => split_rows(rows, a.test_fraction, seed),
    };
    anyhow::ensure!(
        train_rows.len() >= 2 && test_rows.len() >= 2,
        "need at least two train and two test samples, got {} and {}",
        train_rows.len(),
        test_rows.len()
    );
    let train = all_examples(&train_rows);
    let test = all_examples(&test_rows);
    let kinds = [HeadKind::DirectModel, HeadKind::DirectPrompt, HeadKind::DirectTask];
    let path = a.out.join("ablation.csv");
    let mut w = csv_out(&path)?;
    let mut header = vec!["zeroed".to_string()];
    header.extend(ABLATION_SCENARIOS.iter().map(|s| s.as_str().to_string()));
    w.write_record(&header)?;
    for z in Ablation::ALL {
        let r = token_ablation(|t| train_heads(t, &kinds, &cfg), &train, &test, z, a.model)?;
        let mut rec = vec![z.as_str().to_string()];
        rec.extend(r.rel_auc.iter().map(|(_, v)| format!("{:.2}", 100.0 * v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    manifest.outputs.push(path);
    manifest.finish(&mpath)
}

pub fn bench(a: &BenchArgs, seed: u64) -> Result<()> {
    if a.repeats < 10 {
        return Err(usage("--repeats must be at least 10"));
    }
    if a.sizes.is_empty() || a.sizes.iter().any(|&s| s < 16) {
        return Err(usage("--sizes must be non-empty and each at least 16"));
    }
    let mut manifest = RunManifest::new("bench", &tagged(a, seed), seeds(&[]))?;
    manifest.outputs.push(a.out.clone());
    let mpath = manifest_path(&a.out, false);
    manifest.begin(&mpath)?;

    let mut w = csv_out(&a.out)?;
    w.write_record([
        "mask_size",
        "repeats",
        "usam_head_s",
        "mean_entropy_s",
        "single_inference_s",
        "mc_loop_s",
        "entropy_over_usam",
        "mc_over_single",
    ])?;
    for &size in &a.sizes {
        let r = bench_uq_overhead(size, a.repeats)?;
        w.write_record([
            size.to_string(),
            r.repeats.to_string(),
            format!("{:.9}", r.usam_head),
            format!("{:.9}", r.mean_entropy),
            format!("{:.9}", r.single_inference),
            format!("{:.9}", r.mc_loop),
            format!("{:.3}", r.entropy_over_usam()),
            format!("{:.3}", r.mc_over_single()),
        ])?;
    }
    w.flush()?;
    manifest.finish(&mpath)
}

#[derive(Serialize)]
struct SelectedMask {
    head: usize,
    sam_score: f64,
    mask: RleMask,
}

#[derive(Serialize)]
struct MaskLine<'a> {
    image_id: &'a str,
    height: usize,
    width: usize,
    gt: RleMask,
    /// Highest-SamScore proposal per model at the first prompt.
    selected: BTreeMap<&'static str, SelectedMask>,
}

pub fn export(a: &ExportArgs, seed: u64) -> Result<()> {
    let mut manifest = RunManifest::new("export", &tagged(a, seed), seeds(&[]))?;
    manifest.inputs.push(a.records.clone());
    let mpath = manifest_path(&a.out, true);
    manifest.begin(&mpath)?;

    let targets: PathBuf = a.out.join("targets.csv");
    let masks: PathBuf = a.out.join("masks.jsonl");
    let mut t = csv_out(&targets)?;
    t.write_record([
        "sample_id",
        "image_id",
        "model",
        "iou_large",
        "iou_base_plus",
        "iou_small",
        "iou_tiny",
        "iou_refined",
        "iou_sam_selected",
        "delta_model",
        "delta_prompt",
        "delta_task",
    ])?;
    let mut m = create(&masks)?;
    for (i, set) in RecordReader::open(&a.records)?.enumerate() {
        let set = set?;
        for e in usamkit::usam::training_examples(&set, i as u64)? {
            let mut rec = vec![i.to_string(), set.image_id.clone(), e.source.as_str().to_string()];
            rec.extend(ModelId::ALL.iter().map(|&mm| exact(e.iou_of(mm))));
            rec.extend([e.iou_refined, e.iou_sam_selected, e.delta_model(), e.delta_prompt(), e.delta_task()].map(exact));
            t.write_record(&rec)?;
        }
        let mut selected = BTreeMap::new();
        for model in ModelId::ALL {
            let heads = set.heads(AugKind::Identity, 0, model)?;
            let h = sam_selected(&heads);
            selected.insert(
                model.as_str(),
                SelectedMask {
                    head: h,
                    sam_score: heads[h].sam_score,
                    mask: rle_encode(&heads[h].mask.to_binary()),
                },
            );
        }
        let line = MaskLine {
            image_id: &set.image_id,
            height: set.gt.height(),
            width: set.gt.width(),
            gt: rle_encode(&set.gt),
            selected,
        };
        writeln!(m, "{}", serde_json::to_string(&line)?)?;
    }
    t.flush()?;
    m.flush()?;
    manifest.outputs.extend([targets, masks]);
    manifest.finish(&mpath)
}
