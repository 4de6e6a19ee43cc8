//! Consistency processing: a tagger trained on original plus augmented data
//! re-labels every augmented sample, and only samples whose predicted slots
//! agree with their coarse labels and with the source slots survive.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::augmentor::AugmentedSample;
use crate::corpus::{Dataset, LabeledUtterance, OUTSIDE};
use crate::error::{Error, Result};
use crate::metrics::{extract_spans, Span, SpanSet};
use crate::tagger::{train_tagger, SequenceLabeler, TaggerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Prediction length differs from the sample.
    PredictionShape,
    /// A non-O coarse position was predicted differently.
    SlotLabelDisagreement,
    /// The coarse slot spans do not map back onto the source spans.
    SourceSpanMismatch,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::PredictionShape => "prediction_shape",
            DropReason::SlotLabelDisagreement => "slot_label_disagreement",
            DropReason::SourceSpanMismatch => "source_span_mismatch",
        }
    }
}

/// Source spans pushed through the alignment; `None` if any slot token was
/// masked or moved out of contiguity.
fn mapped_source_spans(source: &LabeledUtterance, s: &AugmentedSample) -> Option<SpanSet> {
    let spans = extract_spans(&source.labels).ok()?;
    let mut out = SpanSet::new();
    for sp in spans {
        let start = s.alignment.get(sp.start).copied().flatten()?;
        for (k, i) in (sp.start..=sp.end).enumerate() {
            let j = s.alignment.get(i).copied().flatten()?;
            if j != start + k || s.tokens.get(j) != Some(&source.tokens[i]) {
                return None;
            }
        }
        out.insert(Span {
            start,
            end: start + (sp.end - sp.start),
            slot_type: sp.slot_type,
        });
    }
    Some(out)
}

/// The keep rule, checked from scratch: every non-O coarse tag is predicted
/// exactly, and the slot spans so confirmed coincide with the source's spans
/// mapped through the alignment. O positions are unconstrained.
pub fn keep_rule(
    source: &LabeledUtterance,
    sample: &AugmentedSample,
    predicted: &[String],
) -> std::result::Result<(), DropReason> {
    if predicted.len() != sample.tokens.len() || sample.coarse_labels.len() != sample.tokens.len()
    {
        return Err(DropReason::PredictionShape);
    }
    let agrees = sample
        .coarse_labels
        .iter()
        .zip(predicted)
        .all(|(c, p)| c == OUTSIDE || c == p);
    if !agrees {
        return Err(DropReason::SlotLabelDisagreement);
    }
    let confirmed = extract_spans(&sample.coarse_labels).map_err(|_| DropReason::SourceSpanMismatch)?;
    match mapped_source_spans(source, sample) {
        Some(mapped) if mapped == confirmed => Ok(()),
        _ => Err(DropReason::SourceSpanMismatch),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    pub keep_rate_by_mode: BTreeMap<String, f64>,
    pub drop_reasons: BTreeMap<String, usize>,
    /// Training loss of the filter tagger, when one was trained here.
    pub tagger_final_loss: Option<f64>,
}

impl FilterReport {
    pub fn keep_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.kept as f64 / self.total as f64
        }
    }
}

/// Applies the keep rule with a given labeler.
pub fn filter_with<L: SequenceLabeler + ?Sized>(
    labeler: &L,
    original: &Dataset<LabeledUtterance>,
    augmented: &Dataset<AugmentedSample>,
) -> Result<(Dataset<AugmentedSample>, FilterReport)> {
    use rayon::prelude::*;

    let by_id: HashMap<&str, &LabeledUtterance> =
        original.iter().map(|u| (u.id.as_str(), u)).collect();
    let sources = augmented
        .iter()
        .map(|s| {
            by_id.get(s.source_id.as_str()).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "augmented sample {} references unknown source {}",
                    s.id, s.source_id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let verdicts: Vec<std::result::Result<(), DropReason>> = augmented
        .items
        .par_iter()
        .zip(sources.par_iter())
        .map(|(s, src)| keep_rule(src, s, &labeler.predict(&s.tokens)))
        .collect();

    let mut report = FilterReport {
        total: augmented.len(),
        ..Default::default()
    };
    let mut mode_counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut kept = Vec::new();
    for (s, v) in augmented.iter().zip(verdicts) {
        let e = mode_counts.entry(s.mode.to_string()).or_default();
        e.1 += 1;
        match v {
            Ok(()) => {
                e.0 += 1;
                kept.push(s.clone());
            }
            Err(r) => *report.drop_reasons.entry(r.as_str().to_string()).or_default() += 1,
        }
    }
    report.kept = kept.len();
    report.dropped = report.total - report.kept;
    report.keep_rate_by_mode = mode_counts
        .into_iter()
        .map(|(m, (k, t))| (m, k as f64 / t as f64))
        .collect();
    Ok((Dataset::new(augmented.split_name.clone(), kept)?, report))
}

/// Trains a fresh tagger on `original ∪ augmented` (coarse labels) and
/// filters with it.
pub fn filter(
    original: &Dataset<LabeledUtterance>,
    augmented: &Dataset<AugmentedSample>,
    cfg: &TaggerConfig,
) -> Result<(Dataset<AugmentedSample>, FilterReport)> {
    if augmented.is_empty() {
        return Ok((
            Dataset::new(augmented.split_name.clone(), Vec::new())?,
            FilterReport::default(),
        ));
    }
    let mut union: Vec<LabeledUtterance> = original.items.clone();
    for s in augmented.iter() {
        union.push(s.to_labeled()?);
    }
    let (tagger, train_report) = train_tagger(&union, cfg)?;
    let (kept, mut report) = filter_with(&tagger, original, augmented)?;
    report.tagger_final_loss = Some(train_report.final_loss);
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokens, Token};
    use crate::mlm::MaskMode;

    struct Oracle(HashMap<Vec<Token>, Vec<String>>);

    impl SequenceLabeler for Oracle {
        fn predict(&self, t: &[Token]) -> Vec<String> {
            self.0.get(t).cloned().unwrap_or_else(|| vec!["O".into(); t.len()])
        }
    }

    struct AllO;

    impl SequenceLabeler for AllO {
        fn predict(&self, t: &[Token]) -> Vec<String> {
            vec!["O".into(); t.len()]
        }
    }

    fn data() -> (Dataset<LabeledUtterance>, Dataset<AugmentedSample>) {
        let a = LabeledUtterance::parse("a", "fly to boston", "O O B-city").unwrap();
        let b = LabeledUtterance::parse("b", "hello there", "O O").unwrap();
        let sa = AugmentedSample {
            id: "a#word-0".into(),
            source_id: "a".into(),
            mode: MaskMode::Word,
            tokens: tokens(&["go", "to", "boston"]).unwrap(),
            coarse_labels: vec!["O".into(), "O".into(), "B-city".into()],
            alignment: vec![None, Some(1), Some(2)],
            infilled: vec![true, false, false],
        };
        let sb = AugmentedSample {
            id: "b#context-0".into(),
            source_id: "b".into(),
            mode: MaskMode::Context,
            tokens: tokens(&["um", "hi", "there"]).unwrap(),
            coarse_labels: vec!["O".into(); 3],
            alignment: vec![None, Some(2)],
            infilled: vec![true, true, false],
        };
        (
            Dataset::new("train", vec![a, b]).unwrap(),
            Dataset::new("augmented", vec![sa, sb]).unwrap(),
        )
    }

    #[test]
    fn oracle_keeps_everything() {
        let (orig, aug) = data();
        let oracle = Oracle(aug.iter().map(|s| (s.tokens.clone(), s.coarse_labels.clone())).collect());
        let (kept, rep) = filter_with(&oracle, &orig, &aug).unwrap();
        assert_eq!(kept, aug);
        assert_eq!(rep.kept, 2);
        assert_eq!(rep.kept + rep.dropped, rep.total);
    }

    #[test]
    fn all_o_drops_slot_samples_only() {
        let (orig, aug) = data();
        let (kept, rep) = filter_with(&AllO, &orig, &aug).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.items[0].source_id, "b");
        assert_eq!(rep.drop_reasons["slot_label_disagreement"], 1);
        assert_eq!(rep.keep_rate_by_mode["word"], 0.0);
    }

    #[test]
    fn span_mismatch_is_detected() {
        let (orig, mut aug) = data();
        aug.items[0].tokens[2] = Token::new("denver").unwrap();
        let oracle = Oracle(aug.iter().map(|s| (s.tokens.clone(), s.coarse_labels.clone())).collect());
        let (_, rep) = filter_with(&oracle, &orig, &aug).unwrap();
        assert_eq!(rep.drop_reasons["source_span_mismatch"], 1);
    }

    #[test]
    fn unknown_source_is_an_error() {
        let (orig, mut aug) = data();
        aug.items[0].source_id = "zzz".into();
        assert!(filter_with(&AllO, &orig, &aug).is_err());
    }

    #[test]
    fn empty_input() {
        let (orig, _) = data();
        let empty = Dataset::new("augmented", Vec::new()).unwrap();
        let (kept, rep) = filter(&orig, &empty, &TaggerConfig::default()).unwrap();
        assert!(kept.is_empty());
        assert_eq!(rep.total, 0);
    }

    #[test]
    fn trained_filter_is_deterministic() {
        let (orig, aug) = data();
        let cfg = TaggerConfig {
            epochs: 30,
            ..Default::default()
        };
        let a = filter(&orig, &aug, &cfg).unwrap();
        let b = filter(&orig, &aug, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.kept + a.1.dropped, 2);
    }
}
