//! Transfers the learned perturbation structure onto labeled training data:
//! plan masks over context positions, infill them with the pre-trained MLMs
//! and label every generated token `O`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{validate_bio, BioVerdict, Dataset, HasTokens, LabeledUtterance, Token, OUTSIDE};
use crate::error::{Error, Result};
use crate::metrics::extract_spans;
use crate::mlm::{infill, InfillParams, MaskMode, MlmModel, SpanLenSampler};
use crate::rng;
use crate::topic_keywords::{keyword_mask, TopicModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub utterance_id: String,
    pub mode: MaskMode,
    /// Sorted, distinct.
    pub positions: Vec<usize>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Maximal runs of consecutive `true` entries as `(start, len)`.
fn runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < flags.len() {
        if flags[i] {
            let start = i;
            while i < flags.len() && flags[i] {
                i += 1;
            }
            out.push((start, i - start));
        } else {
            i += 1;
        }
    }
    out
}

/// Plans masks given an explicit keyword flag per position (ignored in word
/// mode). Slot-labeled positions are never candidates.
pub fn plan_masks_with(
    utterance: &LabeledUtterance,
    mode: MaskMode,
    is_keyword: &[bool],
    transform_prob: f64,
    seed: u64,
) -> MaskPlan {
    let candidate: Vec<bool> = utterance
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l == OUTSIDE
                && (mode == MaskMode::Word || !is_keyword.get(i).copied().unwrap_or(false))
        })
        .collect();
    let mut rng = rng::rng_from(seed);
    let mut positions = Vec::new();
    match mode {
        MaskMode::Word => {
            for (i, &c) in candidate.iter().enumerate() {
                if c && rng.random::<f64>() < transform_prob {
                    positions.push(i);
                }
            }
        }
        MaskMode::Context => {
            let total = candidate.iter().filter(|c| **c).count();
            let mut remaining = rng::stochastic_round(transform_prob * total as f64, &mut rng);
            let mut by_len = runs(&candidate);
            by_len.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            for (start, len) in by_len {
                if remaining == 0 {
                    break;
                }
                let take = len.min(remaining);
                let offset = rng.random_range(0..=len - take);
                positions.extend(start + offset..start + offset + take);
                remaining -= take;
            }
            positions.sort_unstable();
        }
    }
    MaskPlan {
        utterance_id: utterance.id.clone(),
        mode,
        positions,
    }
}

/// Context mode treats LDA keywords (top `keep_fraction`) and slot entities
/// as keywords; word mode uses slot exclusion only.
pub fn plan_masks(
    utterance: &LabeledUtterance,
    mode: MaskMode,
    topic_model: &TopicModel,
    keep_fraction: f64,
    transform_prob: f64,
    seed: u64,
) -> MaskPlan {
    let is_keyword = match mode {
        MaskMode::Word => vec![false; utterance.len()],
        MaskMode::Context => keyword_mask(topic_model, utterance, keep_fraction).is_keyword,
    };
    plan_masks_with(utterance, mode, &is_keyword, transform_prob, seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub id: String,
    pub source_id: String,
    pub mode: MaskMode,
    pub tokens: Vec<Token>,
    pub coarse_labels: Vec<String>,
    /// Source position → output position; `None` where the source token was masked.
    pub alignment: Vec<Option<usize>>,
    pub infilled: Vec<bool>,
}

impl HasTokens for AugmentedSample {
    fn id(&self) -> &str {
        &self.id
    }
    fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

impl AugmentedSample {
    pub fn to_labeled(&self) -> Result<LabeledUtterance> {
        LabeledUtterance::new(self.id.clone(), self.tokens.clone(), self.coarse_labels.clone())
    }
}

pub fn generate(
    utterance: &LabeledUtterance,
    plan: &MaskPlan,
    model: &MlmModel,
    params: &InfillParams,
    seed: u64,
) -> Result<AugmentedSample> {
    if plan.utterance_id != utterance.id {
        return Err(Error::InvalidArgument(format!(
            "plan for {} applied to {}",
            plan.utterance_id, utterance.id
        )));
    }
    let out = infill(model, &utterance.tokens, &plan.positions, plan.mode, params, seed)?;
    let mut coarse = vec![OUTSIDE.to_string(); out.tokens.len()];
    for (i, a) in out.alignment.iter().enumerate() {
        if let Some(j) = a {
            coarse[*j] = utterance.labels[i].clone();
        }
    }
    Ok(AugmentedSample {
        id: utterance.id.clone(),
        source_id: utterance.id.clone(),
        mode: plan.mode,
        tokens: out.tokens,
        coarse_labels: coarse,
        alignment: out.alignment,
        infilled: out.infilled,
    })
}

/// Why an augmented sample fails the coarse-label contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleViolation {
    Shape(String),
    InvalidBio { index: usize, reason: String },
    InfilledNotOutside { index: usize },
    LabelChanged { source: usize, target: usize },
    SlotSpansChanged,
}

type SlotSpan = (String, Vec<String>);

fn slot_spans(tokens: &[Token], labels: &[String]) -> Option<Vec<SlotSpan>> {
    let spans = extract_spans(labels).ok()?;
    let mut out: Vec<SlotSpan> = spans
        .into_iter()
        .map(|s| {
            let words = tokens[s.start..=s.end].iter().map(|t| t.to_string()).collect();
            (s.slot_type, words)
        })
        .collect();
    out.sort();
    Some(out)
}

/// Multiset of (slot type, slot tokens) in a labeled sequence.
pub fn slot_span_multiset(tokens: &[Token], labels: &[String]) -> Vec<(String, Vec<String>)> {
    slot_spans(tokens, labels).unwrap_or_default()
}

/// Re-derives every invariant of an augmented sample from its source.
pub fn check_sample(source: &LabeledUtterance, s: &AugmentedSample) -> Vec<SampleViolation> {
    let mut v = Vec::new();
    let n = s.tokens.len();
    if s.coarse_labels.len() != n || s.infilled.len() != n || s.alignment.len() != source.len() {
        v.push(SampleViolation::Shape(format!(
            "tokens {n}, labels {}, infilled {}, alignment {} (source {})",
            s.coarse_labels.len(),
            s.infilled.len(),
            s.alignment.len(),
            source.len()
        )));
        return v;
    }
    if let BioVerdict::Invalid { index, reason } = validate_bio(&s.coarse_labels) {
        v.push(SampleViolation::InvalidBio {
            index,
            reason: reason.to_string(),
        });
    }
    for (j, (&f, l)) in s.infilled.iter().zip(&s.coarse_labels).enumerate() {
        if f && l != OUTSIDE {
            v.push(SampleViolation::InfilledNotOutside { index: j });
        }
    }
    let mut hit = vec![false; n];
    for (i, a) in s.alignment.iter().enumerate() {
        match a {
            Some(j) if *j < n && !s.infilled[*j] && !hit[*j] => {
                hit[*j] = true;
                if s.coarse_labels[*j] != source.labels[i] || s.tokens[*j] != source.tokens[i] {
                    v.push(SampleViolation::LabelChanged {
                        source: i,
                        target: *j,
                    });
                }
            }
            Some(j) => v.push(SampleViolation::LabelChanged {
                source: i,
                target: *j,
            }),
            None if source.labels[i] != OUTSIDE => v.push(SampleViolation::LabelChanged {
                source: i,
                target: usize::MAX,
            }),
            None => {}
        }
    }
    // Every output position is either infilled or the image of a source token.
    if hit.iter().zip(&s.infilled).any(|(h, f)| h == f) {
        v.push(SampleViolation::Shape("alignment does not cover output".into()));
    }
    if slot_spans(&source.tokens, &source.labels) != slot_spans(&s.tokens, &s.coarse_labels) {
        v.push(SampleViolation::SlotSpansChanged);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub transform_prob: f64,
    pub copies_per_mode: usize,
    pub keep_fraction: f64,
    pub word_temperature: f64,
    pub context_temperature: f64,
    pub span_len: SpanLenSampler,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            transform_prob: 0.3,
            copies_per_mode: 1,
            keep_fraction: 0.3,
            word_temperature: 1.0,
            context_temperature: 0.8,
            span_len: SpanLenSampler::default(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.transform_prob > 0.0 && self.transform_prob < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "transform_prob must be in (0,1), got {}",
                self.transform_prob
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep_fraction must be in (0,1), got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentStats {
    pub sources: usize,
    pub attempted: usize,
    pub emitted: usize,
    pub empty_plan: usize,
    pub identical: usize,
    pub too_long: usize,
    pub per_mode: BTreeMap<String, usize>,
}

enum Outcome {
    Sample(AugmentedSample),
    EmptyPlan,
    Identical,
    TooLong,
}

fn augment_one(
    utt: &LabeledUtterance,
    mode: MaskMode,
    copy: usize,
    model: &MlmModel,
    topics: &TopicModel,
    cfg: &AugmentConfig,
) -> Result<Outcome> {
    let base = rng::derive_seed(cfg.seed, &format!("augment/{}/{}/{copy}", utt.id, mode));
    let plan = plan_masks(
        utt,
        mode,
        topics,
        cfg.keep_fraction,
        cfg.transform_prob,
        rng::derive_seed(base, "plan"),
    );
    if plan.is_empty() {
        return Ok(Outcome::EmptyPlan);
    }
    let params = InfillParams {
        temperature: match mode {
            MaskMode::Word => cfg.word_temperature,
            MaskMode::Context => cfg.context_temperature,
        },
        span_len: cfg.span_len,
    };
    let mut sample = match generate(utt, &plan, model, &params, rng::derive_seed(base, "infill")) {
        Ok(s) => s,
        Err(Error::SequenceTooLong { .. }) => return Ok(Outcome::TooLong),
        Err(e) => return Err(e),
    };
    if sample.tokens == utt.tokens {
        return Ok(Outcome::Identical);
    }
    sample.id = format!("{}#{}-{copy}", utt.id, mode);
    Ok(Outcome::Sample(sample))
}

/// `copies_per_mode` attempts per source utterance and mode; empty plans,
/// identity outputs and over-long inputs are counted and dropped. Output is
/// ordered by (source order, mode, copy) regardless of thread scheduling.
pub fn augment_dataset(
    dataset: &Dataset<LabeledUtterance>,
    rwm: &MlmModel,
    rcm: &MlmModel,
    topics: &TopicModel,
    cfg: &AugmentConfig,
) -> Result<(Dataset<AugmentedSample>, AugmentStats)> {
    cfg.validate()?;
    let jobs: Vec<(usize, MaskMode, usize)> = (0..dataset.len())
        .flat_map(|i| {
            [MaskMode::Word, MaskMode::Context]
                .into_iter()
                .flat_map(move |m| (0..cfg.copies_per_mode).map(move |c| (i, m, c)))
        })
        .collect();
    let outcomes: Vec<Result<Outcome>> = jobs
        .par_iter()
        .map(|&(i, mode, copy)| {
            let model = match mode {
                MaskMode::Word => rwm,
                MaskMode::Context => rcm,
            };
            augment_one(&dataset.items[i], mode, copy, model, topics, cfg)
        })
        .collect();
    let mut stats = AugmentStats {
        sources: dataset.len(),
        attempted: jobs.len(),
        ..Default::default()
    };
    let mut items = Vec::new();
    for o in outcomes {
        match o? {
            Outcome::Sample(s) => {
                *stats.per_mode.entry(s.mode.to_string()).or_default() += 1;
                items.push(s);
            }
            Outcome::EmptyPlan => stats.empty_plan += 1,
            Outcome::Identical => stats.identical += 1,
            Outcome::TooLong => stats.too_long += 1,
        }
    }
    stats.emitted = items.len();
    Ok((Dataset::new("augmented", items)?, stats))
}

pub fn write_augmented(data: &Dataset<AugmentedSample>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for s in &data.items {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_augmented(path: impl AsRef<Path>) -> Result<Dataset<AugmentedSample>> {
    let path = path.as_ref();
    let r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut items = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: AugmentedSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        items.push(s);
    }
    Dataset::new("augmented", items)
}
