//! Corruption strategies and the training loop.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::vocab::{is_special, BOS, EOS, MASK, NUM_SPECIAL};

use super::model::MlmModel;

/// Which corruption the model is trained (and later decodes) with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Random Word Masking: independent single tokens.
    Word,
    /// Random Context Masking: contiguous non-keyword spans.
    Context,
}

impl MaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::Word => "word",
            MaskMode::Context => "context",
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub mask_rate: f64,
    pub max_span_len: usize,
    pub seed: u64,
}

impl Default for MlmTrainConfig {
    fn default() -> Self {
        MlmTrainConfig {
            batch_size: 8,
            learning_rate: 3e-4,
            epochs: 10,
            mask_rate: 0.15,
            max_span_len: 3,
            seed: 0,
        }
    }
}

impl MlmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask_rate must be in (0,1), got {}",
                self.mask_rate
            )));
        }
        if self.max_span_len == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "max_span_len and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A training sentence plus the positions that context masking must avoid.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmExample {
    pub tokens: Vec<Token>,
    pub keywords: Vec<bool>,
}

impl MlmExample {
    pub fn without_keywords(tokens: Vec<Token>) -> Self {
        let n = tokens.len();
        MlmExample {
            tokens,
            keywords: vec![false; n],
        }
    }
}

/// A corrupted input: model ids and (position, gold id) targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub input: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

/// Wraps word ids with BOS/EOS, truncating to fit `max_len`.
pub fn frame(ids: &[usize], max_len: usize) -> Vec<usize> {
    let keep = ids.len().min(max_len.saturating_sub(2));
    let mut out = Vec::with_capacity(keep + 2);
    out.push(BOS);
    out.extend_from_slice(&ids[..keep]);
    out.push(EOS);
    out
}

/// Word-mode corruption over a framed sequence. Each non-special position
/// is selected with probability `mask_rate`; selected positions become MASK
/// (80%), a random word (10%) or stay unchanged (10%).
pub fn corrupt_word(framed: &[usize], vocab_size: usize, mask_rate: f64, rng: &mut Rng) -> Corruption {
    let mut input = framed.to_vec();
    let mut targets = Vec::new();
    for (i, &id) in framed.iter().enumerate() {
        if is_special(id) || rng.random::<f64>() >= mask_rate {
            continue;
        }
        targets.push((i, id));
        let r: f64 = rng.random();
        if r < 0.8 {
            input[i] = MASK;
        } else if r < 0.9 && vocab_size > NUM_SPECIAL {
            input[i] = rng.random_range(NUM_SPECIAL..vocab_size);
        }
    }
    Corruption { input, targets }
}

/// Picks contiguous spans among `candidate` positions until `target`
/// positions are covered or no candidate is left. Span lengths are uniform
/// in `1..=max_span_len`. Returns sorted positions.
pub fn choose_spans(
    candidate: &[bool],
    target: usize,
    max_span_len: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let n = candidate.len();
    let mut masked = vec![false; n];
    let mut covered = 0;
    while covered < target {
        let open: Vec<usize> = (0..n).filter(|&i| candidate[i] && !masked[i]).collect();
        let Some(&start) = open.choose(rng) else {
            break;
        };
        let len = rng.random_range(1..=max_span_len).min(target - covered);
        let mut i = start;
        while i < n && i < start + len && candidate[i] && !masked[i] {
            masked[i] = true;
            covered += 1;
            i += 1;
        }
    }
    (0..n).filter(|&i| masked[i]).collect()
}

/// Context-mode corruption: spans over non-keyword word positions are
/// replaced by MASK (one per original token). `keywords` is per word, not
/// per framed position.
pub fn corrupt_context(
    framed: &[usize],
    keywords: &[bool],
    mask_rate: f64,
    max_span_len: usize,
    rng: &mut Rng,
) -> Corruption {
    let candidate: Vec<bool> = framed
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            !is_special(id) && i >= 1 && !keywords.get(i - 1).copied().unwrap_or(false)
        })
        .collect();
    let words = framed.iter().filter(|&&id| id != BOS && id != EOS).count();
    let target = rng::stochastic_round(mask_rate * words as f64, rng);
    let positions = choose_spans(&candidate, target, max_span_len, rng);
    let mut input = framed.to_vec();
    let targets = positions
        .into_iter()
        .map(|i| {
            input[i] = MASK;
            (i, framed[i])
        })
        .collect();
    Corruption { input, targets }
}

fn maskable(framed: &[usize], keywords: &[bool], mode: MaskMode) -> bool {
    framed.iter().enumerate().any(|(i, &id)| {
        !is_special(id)
            && (mode == MaskMode::Word || !keywords.get(i.wrapping_sub(1)).copied().unwrap_or(false))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmTrainReport {
    /// Mean masked-token cross-entropy per epoch (training corruption).
    pub epoch_losses: Vec<f64>,
    /// Mean loss on a fixed corruption of the training set before training.
    pub initial_loss: f64,
    /// Same fixed corruption, after training.
    pub final_loss: f64,
    /// Utterances with no maskable position.
    pub skipped: usize,
}

struct Prepared {
    framed: Vec<usize>,
    keywords: Vec<bool>,
}

fn corrupt(p: &Prepared, mode: MaskMode, vsz: usize, cfg: &MlmTrainConfig, rng: &mut Rng) -> Corruption {
    match mode {
        MaskMode::Word => corrupt_word(&p.framed, vsz, cfg.mask_rate, rng),
        MaskMode::Context => {
            corrupt_context(&p.framed, &p.keywords, cfg.mask_rate, cfg.max_span_len, rng)
        }
    }
}

fn fixed_eval_loss(
    model: &MlmModel,
    data: &[Prepared],
    mode: MaskMode,
    cfg: &MlmTrainConfig,
) -> Result<f64> {
    let mut rng = rng::named_rng(cfg.seed, "mlm-eval-corruption");
    let mut total = 0.0;
    let mut count = 0usize;
    for p in data {
        let c = corrupt(p, mode, model.vocab_size(), cfg, &mut rng);
        if c.targets.is_empty() {
            continue;
        }
        total += model.loss(&c.input, &c.targets)?;
        count += c.targets.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Trains `model` in place. Loss is cross-entropy at masked positions only.
pub fn train_mlm(
    model: &mut MlmModel,
    corpus: &[MlmExample],
    mode: MaskMode,
    cfg: &MlmTrainConfig,
) -> Result<MlmTrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let max_len = model.config.max_len;
    let mut skipped = 0;
    let mut data = Vec::with_capacity(corpus.len());
    for ex in corpus {
        let framed = frame(&model.vocab.encode(&ex.tokens), max_len);
        if !maskable(&framed, &ex.keywords, mode) {
            skipped += 1;
            continue;
        }
        data.push(Prepared {
            framed,
            keywords: ex.keywords.clone(),
        });
    }
    let initial_loss = fixed_eval_loss(model, &data, mode, cfg)?;

    let vsz = model.vocab_size();
    let mut opt = Adam::new(
        model.params.len(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
    );
    let mut rng = rng::named_rng(cfg.seed, "mlm-train");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let corrupted: Vec<Corruption> = batch
                .iter()
                .map(|&i| corrupt(&data[i], mode, vsz, cfg, &mut rng))
                .filter(|c| !c.targets.is_empty())
                .collect();
            let n_targets: usize = corrupted.iter().map(|c| c.targets.len()).sum();
            if n_targets == 0 {
                continue;
            }
            grad.fill(0.0);
            let scale = 1.0 / n_targets as f64;
            for c in &corrupted {
                epoch_loss += model.loss_and_grad(&c.input, &c.targets, scale, &mut grad)?;
            }
            epoch_count += n_targets;
            opt.step(&mut model.params, &grad);
        }
        let mean = if epoch_count == 0 {
            0.0
        } else {
            epoch_loss / epoch_count as f64
        };
        log::debug!("mlm {mode} epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument(
            "training diverged (non-finite parameters)".into(),
        ));
    }
    let final_loss = fixed_eval_loss(model, &data, mode, cfg)?;
    Ok(MlmTrainReport {
        epoch_losses,
        initial_loss,
        final_loss,
        skipped,
    })
}

/// Masks words independently with probability `mask_rate` (MASK only) and
/// measures top-1 recovery, never predicting special tokens.
pub fn masked_recovery_accuracy(
    model: &MlmModel,
    sentences: &[Vec<Token>],
    mask_rate: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::named_rng(seed, "mlm-recovery");
    let vsz = model.vocab_size();
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in sentences {
        let framed = frame(&model.vocab.encode(s), model.config.max_len);
        let mut input = framed.clone();
        let mut positions = Vec::new();
        for (i, &id) in framed.iter().enumerate() {
            if !is_special(id) && rng.random::<f64>() < mask_rate {
                input[i] = MASK;
                positions.push(i);
            }
        }
        if positions.is_empty() {
            continue;
        }
        let probs = model.forward(&input)?;
        for &i in &positions {
            let row = &probs[i * vsz..(i + 1) * vsz];
            let best = (NUM_SPECIAL..vsz)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(NUM_SPECIAL);
            correct += usize::from(best == framed[i]);
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}
