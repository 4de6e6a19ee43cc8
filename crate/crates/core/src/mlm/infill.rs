//! Single- and multi-token infilling with a trained masked LM.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::vocab::{BOS, EOS, MASK, NUM_SPECIAL};

use super::model::MlmModel;
use super::train::MaskMode;

/// Distribution of the number of tokens generated per masked position in
/// context mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpanLenSampler {
    Fixed { len: usize },
    /// Geometric on `1, 2, ...` with the given mean, conditioned on `≤ max`.
    Geometric { mean: f64, max: usize },
}

impl Default for SpanLenSampler {
    fn default() -> Self {
        SpanLenSampler::Geometric { mean: 2.0, max: 3 }
    }
}

impl SpanLenSampler {
    pub fn sample(&self, rng: &mut Rng) -> usize {
        match *self {
            SpanLenSampler::Fixed { len } => len.max(1),
            SpanLenSampler::Geometric { mean, max } => {
                let p = (1.0 / mean.max(1.0)).clamp(1e-6, 1.0);
                let max = max.max(1);
                loop {
                    let mut len = 1;
                    while len <= max && rng.random::<f64>() >= p {
                        len += 1;
                    }
                    if len <= max {
                        return len;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfillParams {
    /// Softmax temperature; values ≤ 1e-6 decode greedily.
    pub temperature: f64,
    pub span_len: SpanLenSampler,
}

impl Default for InfillParams {
    fn default() -> Self {
        InfillParams {
            temperature: 1.0,
            span_len: SpanLenSampler::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillOutput {
    pub tokens: Vec<Token>,
    /// Original position → new index; `None` for masked originals.
    pub alignment: Vec<Option<usize>>,
    /// Per output position: generated by the model.
    pub infilled: Vec<bool>,
}

fn sample_word(row: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    let candidates = NUM_SPECIAL..row.len();
    if temperature <= 1e-6 {
        return candidates
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap_or(NUM_SPECIAL);
    }
    // Rescale log-probabilities by the temperature, renormalizing over
    // ordinary words only.
    let logp: Vec<f64> = candidates
        .clone()
        .map(|w| row[w].max(1e-300).ln() / temperature)
        .collect();
    let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return NUM_SPECIAL + i;
        }
    }
    row.len() - 1
}

/// Replaces each masked position with generated tokens, one in word mode
/// and `L ~ span_len` in context mode, filling left to right so that every
/// token is conditioned on those already generated.
pub fn infill(
    model: &MlmModel,
    tokens: &[Token],
    mask_positions: &[usize],
    mode: MaskMode,
    params: &InfillParams,
    seed: u64,
) -> Result<InfillOutput> {
    let n = tokens.len();
    let mut masked = vec![false; n];
    for &p in mask_positions {
        if p >= n {
            return Err(Error::MaskOutOfRange {
                position: p,
                len: n,
            });
        }
        if masked[p] {
            return Err(Error::InvalidArgument(format!(
                "mask position {p} listed twice"
            )));
        }
        masked[p] = true;
    }
    let budget = model.config.max_len.saturating_sub(2);
    if n > budget {
        return Err(Error::SequenceTooLong {
            len: n + 2,
            max_len: model.config.max_len,
        });
    }
    let mut rng = rng::rng_from(seed);

    let num_masked = mask_positions.len();
    let mut spare = budget - n;
    let mut slots: Vec<Option<usize>> = Vec::with_capacity(n);
    let mut alignment = vec![None; n];
    for i in 0..n {
        if masked[i] {
            let len = match mode {
                MaskMode::Word => 1,
                MaskMode::Context => {
                    let want = params.span_len.sample(&mut rng);
                    let extra = (want - 1).min(spare);
                    spare -= extra;
                    1 + extra
                }
            };
            slots.extend(std::iter::repeat_n(None, len));
        } else {
            alignment[i] = Some(slots.len());
            slots.push(Some(i));
        }
    }
    debug_assert!(slots.len() <= budget && slots.len() >= n - num_masked);

    let mut ids = Vec::with_capacity(slots.len() + 2);
    ids.push(BOS);
    ids.extend(slots.iter().map(|s| match s {
        Some(i) => model.vocab.lookup(&tokens[*i]),
        None => MASK,
    }));
    ids.push(EOS);

    let vsz = model.vocab_size();
    for j in 0..slots.len() {
        if slots[j].is_some() {
            continue;
        }
        let probs = model.forward(&ids)?;
        let row = &probs[(j + 1) * vsz..(j + 2) * vsz];
        ids[j + 1] = sample_word(row, params.temperature, &mut rng);
    }

    let mut out = Vec::with_capacity(slots.len());
    let mut infilled = Vec::with_capacity(slots.len());
    for (j, s) in slots.iter().enumerate() {
        match s {
            Some(i) => {
                out.push(tokens[*i].clone());
                infilled.push(false);
            }
            None => {
                out.push(Token::new(model.vocab.word(ids[j + 1]))?);
                infilled.push(true);
            }
        }
    }
    Ok(InfillOutput {
        tokens: out,
        alignment,
        infilled,
    })
}
