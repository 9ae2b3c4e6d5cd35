//! Record files, the run-length mask codec and a replay backend.
//!
//! A record file is JSON Lines. Line 1 is `{"schema_version":1}`; every
//! further line holds one sample set:
//!
//! ```text
//! {"image_id":..., "height":H, "width":W, "gt_rle":[...], "n_prompts":K,
//!  "records":[{"aug","prompt_index","model","head","sam_score","mask_b64","tokens_b64"}],
//!  "refined_records":[{"model","head","sam_score","mask_b64","tokens_b64"}]}
//! ```
//!
//! Masks and tokens are base64 of little-endian `f32`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::backend::{ForwardOutput, SegmentationBackend, TOKEN_DIM};
use crate::bayes::{Record, SampleSet};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbMask};
use crate::sampling::{AugKind, ModelId, PointPrompt, RgbImage, SampleConfig, NUM_HEADS};

pub const SCHEMA_VERSION: u32 = 1;

/// Alternating run lengths over the row-major mask, background first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RleMask {
    pub counts: Vec<u64>,
}

pub fn rle_encode(m: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &v in m.data() {
        if v != current {
            counts.push(run);
            current = v;
            run = 0;
        }
        run += 1;
    }
    counts.push(run);
    RleMask { counts }
}

pub fn rle_decode(r: &RleMask, height: usize, width: usize) -> Result<BinaryMask> {
    let expected = (height * width) as u64;
    let sum = r.counts.iter().try_fold(0u64, |a, &c| a.checked_add(c));
    match sum {
        Some(s) if s == expected => {}
        _ => {
            return Err(Error::RleSum {
                sum: sum.unwrap_or(u64::MAX),
                expected,
            })
        }
    }
    let mut data = Vec::with_capacity(height * width);
    for (i, &c) in r.counts.iter().enumerate() {
        data.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    BinaryMask::new(width, height, data)
}

fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f32(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| format!("invalid base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    aug: AugKind,
    prompt_index: usize,
    model: ModelId,
    head: usize,
    sam_score: f64,
    mask_b64: String,
    tokens_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRefined {
    model: ModelId,
    head: usize,
    sam_score: f64,
    mask_b64: String,
    tokens_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSet {
    image_id: String,
    height: usize,
    width: usize,
    gt_rle: RleMask,
    n_prompts: usize,
    records: Vec<RawRecord>,
    #[serde(default)]
    refined_records: Vec<RawRefined>,
}

fn to_raw(set: &SampleSet) -> RawSet {
    RawSet {
        image_id: set.image_id.clone(),
        height: set.gt.height(),
        width: set.gt.width(),
        gt_rle: rle_encode(&set.gt),
        n_prompts: set.n_prompts,
        records: set
            .records()
            .iter()
            .map(|r| RawRecord {
                aug: r.config.aug,
                prompt_index: r.config.prompt_index,
                model: r.config.model,
                head: r.config.head,
                sam_score: r.sam_score,
                mask_b64: encode_f32(r.mask.data()),
                tokens_b64: encode_f32(&r.tokens),
            })
            .collect(),
        refined_records: set
            .refined_records()
            .iter()
            .map(|r| RawRefined {
                model: r.config.model,
                head: r.config.head,
                sam_score: r.sam_score,
                mask_b64: encode_f32(r.mask.data()),
                tokens_b64: encode_f32(&r.tokens),
            })
            .collect(),
    }
}

/// Field-level failure inside one line.
struct FieldError {
    field: String,
    message: String,
}

fn field(field: impl Into<String>, message: impl ToString) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.to_string(),
    }
}

#[allow(clippy::too_many_arguments)]
fn decode_record(
    at: &str,
    config: SampleConfig,
    sam_score: f64,
    mask_b64: &str,
    tokens_b64: &str,
    width: usize,
    height: usize,
) -> std::result::Result<Record, FieldError> {
    let mask = decode_f32(mask_b64).map_err(|m| field(format!("{at}.mask_b64"), m))?;
    if mask.len() != width * height {
        return Err(field(
            format!("{at}.mask_b64"),
            format!("{} values, expected {}", mask.len(), width * height),
        ));
    }
    let tokens = decode_f32(tokens_b64).map_err(|m| field(format!("{at}.tokens_b64"), m))?;
    if tokens.len() != TOKEN_DIM {
        return Err(field(
            format!("{at}.tokens_b64"),
            format!("tokens have {} values, expected {TOKEN_DIM}", tokens.len()),
        ));
    }
    if config.head >= NUM_HEADS {
        return Err(field(format!("{at}.head"), format!("head {} >= {NUM_HEADS}", config.head)));
    }
    if !(sam_score.is_finite() && sam_score >= 0.0) {
        return Err(field(format!("{at}.sam_score"), format!("{sam_score} must be >= 0")));
    }
    let mask = ProbMask::new(width, height, mask).map_err(|e| field(format!("{at}.mask_b64"), e))?;
    Ok(Record {
        config,
        mask,
        sam_score,
        tokens,
    })
}

/// Every forward pass present must have exactly the three proposals.
fn check_heads(configs: impl Iterator<Item = (String, usize)>, at: &str) -> std::result::Result<(), FieldError> {
    let mut passes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (key, head) in configs {
        passes.entry(key).or_default().push(head);
    }
    for (key, mut heads) in passes {
        heads.sort_unstable();
        if heads != [0, 1, 2] {
            return Err(field(at, format!("pass {key} has heads {heads:?}, expected [0, 1, 2]")));
        }
    }
    Ok(())
}

fn from_raw(raw: RawSet) -> std::result::Result<SampleSet, FieldError> {
    let (w, h) = (raw.width, raw.height);
    let gt = rle_decode(&raw.gt_rle, h, w).map_err(|e| field("gt_rle", e))?;
    check_heads(
        raw.records
            .iter()
            .map(|r| (format!("{}/{}/{}", r.aug, r.prompt_index, r.model), r.head)),
        "records",
    )?;
    check_heads(
        raw.refined_records.iter().map(|r| (r.model.to_string(), r.head)),
        "refined_records",
    )?;
    let mut records = Vec::with_capacity(raw.records.len());
    for (i, r) in raw.records.iter().enumerate() {
        let config = SampleConfig {
            aug: r.aug,
            prompt_index: r.prompt_index,
            model: r.model,
            head: r.head,
        };
        if r.prompt_index >= raw.n_prompts {
            return Err(field(
                format!("records[{i}].prompt_index"),
                format!("{} >= n_prompts {}", r.prompt_index, raw.n_prompts),
            ));
        }
        records.push(decode_record(&format!("records[{i}]"), config, r.sam_score, &r.mask_b64, &r.tokens_b64, w, h)?);
    }
    let mut refined = Vec::with_capacity(raw.refined_records.len());
    for (i, r) in raw.refined_records.iter().enumerate() {
        let config = SampleConfig {
            aug: AugKind::Identity,
            prompt_index: 0,
            model: r.model,
            head: r.head,
        };
        refined.push(decode_record(
            &format!("refined_records[{i}]"),
            config,
            r.sam_score,
            &r.mask_b64,
            &r.tokens_b64,
            w,
            h,
        )?);
    }
    SampleSet::new(raw.image_id, gt, raw.n_prompts, records, refined).map_err(|e| field("records", e))
}

/// Serializes one set as a single JSON line (without the newline).
pub fn encode_line(set: &SampleSet) -> Result<String> {
    Ok(serde_json::to_string(&to_raw(set))?)
}

/// Streams sample sets from a record file, one line at a time.
pub struct RecordReader<R> {
    lines: std::io::Lines<R>,
    path: String,
    line: usize,
    seen_header: bool,
}

impl RecordReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufReader::new(f), path.display().to_string()))
    }
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R, path: impl Into<String>) -> Self {
        Self {
            lines: reader.lines(),
            path: path.into(),
            line: 0,
            seen_header: false,
        }
    }

    fn parse_error(&self, field: String, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            field,
            message,
        }
    }

    fn next_line(&mut self) -> Option<Result<String>> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::io(PathBuf::from(&self.path), e))),
            };
            self.line += 1;
            if !text.trim().is_empty() {
                return Some(Ok(text));
            }
        }
    }

    fn parse_json<T: for<'de> Deserialize<'de>>(&self, text: &str) -> Result<T> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            self.parse_error(path, e.into_inner().to_string())
        })
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<SampleSet>;

    fn next(&mut self) -> Option<Self::Item> {
        let text = match self.next_line()? {
            Ok(t) => t,
            Err(e) => return Some(Err(e)),
        };
        if !self.seen_header {
            self.seen_header = true;
            let header = match self.parse_json::<Header>(&text) {
                Ok(h) => h,
                Err(e) => return Some(Err(e)),
            };
            if header.schema_version != SCHEMA_VERSION {
                return Some(Err(self.parse_error(
                    "schema_version".into(),
                    format!("unsupported version {}", header.schema_version),
                )));
            }
            return self.next();
        }
        let raw: RawSet = match self.parse_json(&text) {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        Some(from_raw(raw).map_err(|f| self.parse_error(f.field, f.message)))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<SampleSet>> {
    RecordReader::open(path)?.collect()
}

pub struct RecordWriter<W: Write> {
    out: W,
}

impl RecordWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        RecordWriter::new(BufWriter::new(f)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            e => e,
        })
    }
}

impl<W: Write> RecordWriter<W> {
    /// Writes the schema line.
    pub fn new(mut out: W) -> Result<Self> {
        let header = serde_json::to_string(&Header {
            schema_version: SCHEMA_VERSION,
        })?;
        writeln!(out, "{header}").map_err(|e| Error::io("<records>", e))?;
        Ok(Self { out })
    }

    pub fn write(&mut self, set: &SampleSet) -> Result<()> {
        let line = encode_line(set)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("<records>", e))
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(|e| Error::io("<records>", e))?;
        Ok(self.out)
    }
}

pub fn write_records(path: &Path, sets: &[SampleSet]) -> Result<()> {
    let mut w = RecordWriter::create(path)?;
    for s in sets {
        w.write(s)?;
    }
    w.finish().map(|_| ()).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })
}

/// Replays stored predictions: answers a forward pass with the identity
/// records whose prompt matches, or the refined records for the refined
/// prompt. The image only has to match the stored size.
pub struct RecordBackend<'a> {
    set: &'a SampleSet,
    prompts: Vec<PointPrompt>,
    refined: Option<PointPrompt>,
}

impl<'a> RecordBackend<'a> {
    /// `prompts[i]` is the prompt of `prompt_index == i`.
    pub fn new(set: &'a SampleSet, prompts: Vec<PointPrompt>, refined: Option<PointPrompt>) -> Result<Self> {
        if prompts.len() != set.n_prompts {
            return Err(Error::LengthMismatch(prompts.len(), set.n_prompts));
        }
        Ok(Self { set, prompts, refined })
    }
}

impl SegmentationBackend for RecordBackend<'_> {
    fn forward(&self, image: &RgbImage, prompt: &PointPrompt, model: ModelId) -> Result<ForwardOutput> {
        if image.width() != self.set.gt.width() || image.height() != self.set.gt.height() {
            return Err(Error::ShapeMismatch {
                left_w: image.width(),
                left_h: image.height(),
                right_w: self.set.gt.width(),
                right_h: self.set.gt.height(),
            });
        }
        let heads = if self.refined.as_ref() == Some(prompt) {
            self.set.refined_heads(model)?
        } else {
            let i = self
                .prompts
                .iter()
                .position(|p| p == prompt)
                .ok_or_else(|| Error::InvalidConfig(format!("no stored prediction for prompt {:?}", prompt.points)))?;
            self.set.heads(AugKind::Identity, i, model)?
        };
        let out = ForwardOutput {
            masks: heads.map(|r| r.mask.clone()),
            sam_scores: heads.map(|r| r.sam_score),
            tokens: heads.map(|r| r.tokens.clone()),
        };
        out.validate()?;
        Ok(out)
    }
}
