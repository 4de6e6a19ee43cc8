//! Exact-match span F1 and the perturbation recovery rate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{validate_bio, BioVerdict, Tag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub slot_type: String,
}

pub type SpanSet = BTreeSet<Span>;

/// Maximal `B-t I-t*` runs. Rejects invalid BIO.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Result<SpanSet> {
    if let BioVerdict::Invalid { index, reason } = validate_bio(labels) {
        return Err(Error::InvalidBio {
            id: String::new(),
            index,
            reason: reason.to_string(),
        });
    }
    let mut spans = SpanSet::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, l) in labels.iter().enumerate() {
        // Validated above.
        let tag = Tag::parse(l.as_ref()).expect("validated");
        match tag {
            Tag::Inside(_) => continue,
            Tag::Begin(_) | Tag::Outside => {
                if let Some((s, ty)) = open.take() {
                    spans.insert(Span {
                        start: s,
                        end: i - 1,
                        slot_type: ty.to_string(),
                    });
                }
                if let Tag::Begin(ty) = tag {
                    open = Some((i, ty));
                }
            }
        }
    }
    if let Some((s, ty)) = open {
        spans.insert(Span {
            start: s,
            end: labels.len() - 1,
            slot_type: ty.to_string(),
        });
    }
    Ok(spans)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanScores {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 {
            if gold == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            matched as f64 / predicted as f64
        };
        let recall = if gold == 0 {
            if predicted == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            matched as f64 / gold as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        SpanScores {
            precision,
            recall,
            f1,
            matched,
            predicted,
            gold,
        }
    }
}

/// Micro-averaged exact span match over aligned label sequences.
pub fn span_f1<G: AsRef<[String]>, P: AsRef<[String]>>(gold: &[G], pred: &[P]) -> Result<SpanScores> {
    if gold.len() != pred.len() {
        return Err(Error::Alignment(format!(
            "{} gold utterances vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let (mut matched, mut n_pred, mut n_gold) = (0, 0, 0);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g.len() != p.len() {
            return Err(Error::Alignment(format!(
                "utterance {i}: {} gold labels vs {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gs = extract_spans(g)?;
        let ps = extract_spans(p)?;
        matched += gs.intersection(&ps).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    Ok(SpanScores::from_counts(matched, n_pred, n_gold))
}

/// `(method_p − baseline_p) / (baseline_c − baseline_p)`.
pub fn perturbation_recovery_rate(
    f1_method_p: f64,
    f1_baseline_p: f64,
    f1_baseline_c: f64,
) -> Result<f64> {
    let denom = f1_baseline_c - f1_baseline_p;
    if denom == 0.0 {
        return Err(Error::UndefinedRecoveryRate(f1_baseline_c));
    }
    Ok((f1_method_p - f1_baseline_p) / denom)
}

/// F1 of one model on the clean test set and each perturbed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub name: String,
    pub clean_f1: f64,
    pub perturbed_f1: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub perturbation: String,
    pub f1: f64,
    pub baseline_f1: f64,
    /// `None` when the baseline shows no perturbation drop.
    pub recovery_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub baseline: String,
    pub clean_f1: f64,
    pub baseline_clean_f1: f64,
    pub rows: Vec<PerturbationRow>,
    pub overall_f1: f64,
    pub overall_baseline_f1: f64,
    /// Mean of the defined per-perturbation recovery rates.
    pub overall_recovery_rate: Option<f64>,
}

pub fn build_report(method: &MethodRun, baseline: &MethodRun) -> Result<EvalReport> {
    let mk: Vec<&String> = method.perturbed_f1.keys().collect();
    let bk: Vec<&String> = baseline.perturbed_f1.keys().collect();
    if mk != bk {
        return Err(Error::KeyMismatch(format!("{mk:?} vs {bk:?}")));
    }
    let rows: Vec<PerturbationRow> = method
        .perturbed_f1
        .iter()
        .map(|(k, &f1)| {
            let b = baseline.perturbed_f1[k];
            PerturbationRow {
                perturbation: k.clone(),
                f1,
                baseline_f1: b,
                recovery_rate: perturbation_recovery_rate(f1, b, baseline.clean_f1).ok(),
            }
        })
        .collect();
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    Ok(EvalReport {
        method: method.name.clone(),
        baseline: baseline.name.clone(),
        clean_f1: method.clean_f1,
        baseline_clean_f1: baseline.clean_f1,
        overall_f1: mean(rows.iter().map(|r| r.f1).collect()).unwrap_or(f64::NAN),
        overall_baseline_f1: mean(rows.iter().map(|r| r.baseline_f1).collect())
            .unwrap_or(f64::NAN),
        overall_recovery_rate: mean(rows.iter().filter_map(|r| r.recovery_rate).collect()),
        rows,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

impl EvalReport {
    /// Aligned plain-text table: F1 in percent, P_r in parentheses.
    pub fn to_text(&self) -> String {
        let mut cols = vec!["Clean".to_string()];
        cols.extend(self.rows.iter().map(|r| r.perturbation.clone()));
        cols.push("Overall".to_string());
        let name_w = self.method.len().max(self.baseline.len()).max(6);
        let mut base_cells = vec![pct(self.baseline_clean_f1)];
        base_cells.extend(self.rows.iter().map(|r| pct(r.baseline_f1)));
        base_cells.push(pct(self.overall_baseline_f1));
        let rate = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{}%", pct(v)));
        let mut method_cells = vec![format!(
            "{} ({:+.1})",
            pct(self.clean_f1),
            (self.clean_f1 - self.baseline_clean_f1) * 100.0
        )];
        method_cells.extend(
            self.rows
                .iter()
                .map(|r| format!("{} ({})", pct(r.f1), rate(r.recovery_rate))),
        );
        method_cells.push(format!(
            "{} ({})",
            pct(self.overall_f1),
            rate(self.overall_recovery_rate)
        ));
        let widths: Vec<usize> = cols
            .iter()
            .enumerate()
            .map(|(i, c)| c.len().max(base_cells[i].len()).max(method_cells[i].len()))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, name: &str, cells: &[String]| {
            let _ = write!(out, "{name:<name_w$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        };
        line(&mut out, "Method", &cols);
        line(&mut out, &self.baseline, &base_cells);
        line(&mut out, &self.method, &method_cells);
        out.push_str("F1 in percent; parentheses: clean-F1 change, otherwise perturbation recovery rate P_r.\n");
        out
    }
}
