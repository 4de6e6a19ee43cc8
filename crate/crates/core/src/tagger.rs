//! Window-based feed-forward sequence labeler: embeddings of positions
//! `i-w..=i+w` are concatenated, passed through one tanh layer and a softmax
//! over tags. Greedy decoding followed by BIO repair.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{repair_bio, LabeledUtterance, Token, OUTSIDE};
use crate::error::{Error, Result};
use crate::nn::{matmul, randn, softmax_in_place, Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::vocab::{Vocabulary, PAD};

/// Anything that maps a token sequence to a BIO label sequence.
pub trait SequenceLabeler: Sync {
    fn predict(&self, tokens: &[Token]) -> Vec<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaggerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub window: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub min_freq: usize,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            epochs: 15,
            learning_rate: 3e-3,
            seed: 0,
            window: 2,
            emb_dim: 32,
            hidden: 128,
            dropout: 0.2,
            batch_size: 16,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggerArch {
    pub window: usize,
    pub emb_dim: usize,
    pub hidden: usize,
}

impl TaggerArch {
    fn input_dim(&self) -> usize {
        (2 * self.window + 1) * self.emb_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggerLayout {
    pub emb: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub total: usize,
}

impl TaggerLayout {
    fn new(arch: &TaggerArch, vocab_size: usize, num_tags: usize) -> Self {
        let e = vocab_size * arch.emb_dim;
        let w1 = arch.input_dim() * arch.hidden;
        let w2 = arch.hidden * num_tags;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        TaggerLayout {
            emb: take(e),
            w1: take(w1),
            b1: take(arch.hidden),
            w2: take(w2),
            b2: take(num_tags),
            total: at,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaggerModel {
    pub arch: TaggerArch,
    pub vocab: Vocabulary,
    pub tags: Vec<String>,
    pub params: Vec<f64>,
    layout: TaggerLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Mean per-token loss on the training set before the first update.
    pub initial_loss: f64,
    /// Same, after training (dropout off).
    pub final_loss: f64,
}

struct Activations {
    /// `T × input_dim`
    x: Vec<f64>,
    /// `T × hidden`, after tanh and dropout
    h: Vec<f64>,
    /// dropout scale per hidden unit (1 when disabled)
    keep: Vec<f64>,
    /// `T × tags`
    probs: Vec<f64>,
}

impl TaggerModel {
    pub fn new(arch: TaggerArch, vocab: Vocabulary, tags: Vec<String>, seed: u64) -> Result<Self> {
        if arch.emb_dim == 0 || arch.hidden == 0 {
            return Err(Error::InvalidArgument("emb_dim and hidden must be >= 1".into()));
        }
        if !tags.iter().any(|t| t == OUTSIDE) {
            return Err(Error::InvalidArgument("tag inventory must contain O".into()));
        }
        let layout = TaggerLayout::new(&arch, vocab.len(), tags.len());
        let mut params = vec![0.0; layout.total];
        let mut rng = rng::named_rng(seed, "tagger-init");
        for p in &mut params[layout.emb.clone()] {
            *p = randn(&mut rng) * 0.1;
        }
        let s1 = 1.0 / (arch.input_dim() as f64).sqrt();
        for p in &mut params[layout.w1.clone()] {
            *p = randn(&mut rng) * s1;
        }
        let s2 = 1.0 / (arch.hidden as f64).sqrt();
        for p in &mut params[layout.w2.clone()] {
            *p = randn(&mut rng) * s2;
        }
        Ok(TaggerModel {
            arch,
            vocab,
            tags,
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &TaggerLayout {
        &self.layout
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    /// Tag ids for gold labels; unknown tags map to `O`. Returns the number
    /// of unknown tags seen.
    pub fn encode_tags(&self, labels: &[String]) -> (Vec<usize>, usize) {
        let o = self.tag_id(OUTSIDE).expect("O in inventory");
        let mut unknown = 0;
        let ids = labels
            .iter()
            .map(|l| {
                self.tag_id(l).unwrap_or_else(|| {
                    unknown += 1;
                    o
                })
            })
            .collect();
        (ids, unknown)
    }

    fn forward(&self, ids: &[usize], dropout: Option<(f64, &mut Rng)>) -> Activations {
        let TaggerArch {
            window,
            emb_dim,
            hidden,
        } = self.arch;
        let t = ids.len();
        let din = self.arch.input_dim();
        let nt = self.num_tags();
        let emb = &self.params[self.layout.emb.clone()];
        let mut x = vec![0.0; t * din];
        for i in 0..t {
            for o in 0..=2 * window {
                let j = i as isize + o as isize - window as isize;
                let id = if j < 0 || j as usize >= t {
                    PAD
                } else {
                    ids[j as usize]
                };
                x[i * din + o * emb_dim..i * din + (o + 1) * emb_dim]
                    .copy_from_slice(&emb[id * emb_dim..(id + 1) * emb_dim]);
            }
        }
        let mut h = vec![0.0; t * hidden];
        matmul(&x, &self.params[self.layout.w1.clone()], t, din, hidden, &mut h);
        let b1 = &self.params[self.layout.b1.clone()];
        for row in h.chunks_mut(hidden) {
            for (v, b) in row.iter_mut().zip(b1) {
                *v = (*v + b).tanh();
            }
        }
        let mut keep = vec![1.0; t * hidden];
        if let Some((rate, rng)) = dropout {
            if rate > 0.0 {
                for (k, v) in keep.iter_mut().zip(h.iter_mut()) {
                    *k = if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        1.0 / (1.0 - rate)
                    };
                    *v *= *k;
                }
            }
        }
        let mut probs = vec![0.0; t * nt];
        matmul(&h, &self.params[self.layout.w2.clone()], t, hidden, nt, &mut probs);
        let b2 = &self.params[self.layout.b2.clone()];
        for row in probs.chunks_mut(nt) {
            for (v, b) in row.iter_mut().zip(b2) {
                *v += b;
            }
            softmax_in_place(row);
        }
        Activations { x, h, keep, probs }
    }

    /// Summed per-token cross-entropy without dropout.
    pub fn loss(&self, tokens: &[Token], gold: &[usize]) -> f64 {
        let ids = self.vocab.encode(tokens);
        let act = self.forward(&ids, None);
        let nt = self.num_tags();
        gold.iter()
            .enumerate()
            .map(|(i, &g)| -act.probs[i * nt + g].max(1e-300).ln())
            .sum()
    }

    /// Adds `scale · ∂loss/∂θ` into `grad` and returns the summed loss.
    pub fn loss_and_grad(
        &self,
        tokens: &[Token],
        gold: &[usize],
        scale: f64,
        grad: &mut [f64],
        dropout: Option<(f64, &mut Rng)>,
    ) -> f64 {
        let ids = self.vocab.encode(tokens);
        let act = self.forward(&ids, dropout);
        let TaggerArch {
            window,
            emb_dim,
            hidden,
        } = self.arch;
        let t = ids.len();
        let din = self.arch.input_dim();
        let nt = self.num_tags();
        let lay = &self.layout;
        let mut loss = 0.0;
        let mut dlogits = act.probs.clone();
        for (i, &g) in gold.iter().enumerate() {
            loss -= act.probs[i * nt + g].max(1e-300).ln();
            dlogits[i * nt + g] -= 1.0;
        }
        for v in dlogits.iter_mut() {
            *v *= scale;
        }
        let w2 = &self.params[lay.w2.clone()];
        let w1 = &self.params[lay.w1.clone()];
        for i in 0..t {
            let dl = &dlogits[i * nt..(i + 1) * nt];
            let hrow = &act.h[i * hidden..(i + 1) * hidden];
            for (k, &dv) in dl.iter().enumerate() {
                grad[lay.b2.start + k] += dv;
            }
            let mut dpre = vec![0.0; hidden];
            for j in 0..hidden {
                let mut dh = 0.0;
                for k in 0..nt {
                    grad[lay.w2.start + j * nt + k] += hrow[j] * dl[k];
                    dh += w2[j * nt + k] * dl[k];
                }
                let keep = act.keep[i * hidden + j];
                // h = keep · tanh(pre); tanh(pre) = h / keep where keep > 0.
                let th = if keep == 0.0 { 0.0 } else { hrow[j] / keep };
                dpre[j] = dh * keep * (1.0 - th * th);
            }
            let xrow = &act.x[i * din..(i + 1) * din];
            for j in 0..hidden {
                grad[lay.b1.start + j] += dpre[j];
            }
            for p in 0..din {
                let mut dx = 0.0;
                for j in 0..hidden {
                    grad[lay.w1.start + p * hidden + j] += xrow[p] * dpre[j];
                    dx += w1[p * hidden + j] * dpre[j];
                }
                let o = p / emb_dim;
                let c = p % emb_dim;
                let jpos = i as isize + o as isize - window as isize;
                let id = if jpos < 0 || jpos as usize >= t {
                    PAD
                } else {
                    ids[jpos as usize]
                };
                grad[lay.emb.start + id * emb_dim + c] += dx;
            }
        }
        loss
    }

    /// Per-position tag distributions, `T × tags`.
    pub fn tag_probs(&self, tokens: &[Token]) -> Vec<f64> {
        self.forward(&self.vocab.encode(tokens), None).probs
    }

    /// Greedy tags before BIO repair.
    pub fn predict_raw(&self, tokens: &[Token]) -> Vec<String> {
        let nt = self.num_tags();
        self.tag_probs(tokens)
            .chunks(nt)
            .map(|row| {
                let best = (0..nt)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                self.tags[best].clone()
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = TaggerCheckpoint {
            format: TAGGER_FORMAT.into(),
            version: TAGGER_VERSION,
            arch: self.arch,
            vocabulary: self.vocab.clone(),
            tags: self.tags.clone(),
            params: self.params.clone(),
        };
        fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: TaggerCheckpoint = serde_json::from_str(&text)?;
        if ck.format != TAGGER_FORMAT || ck.version != TAGGER_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let layout = TaggerLayout::new(&ck.arch, ck.vocabulary.len(), ck.tags.len());
        if layout.total != ck.params.len() || ck.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("parameter vector does not match layout".into()));
        }
        Ok(TaggerModel {
            arch: ck.arch,
            vocab: ck.vocabulary,
            tags: ck.tags,
            params: ck.params,
            layout,
        })
    }
}

impl SequenceLabeler for TaggerModel {
    fn predict(&self, tokens: &[Token]) -> Vec<String> {
        repair_bio(&self.predict_raw(tokens))
    }
}

pub const TAGGER_FORMAT: &str = "slotaug-tagger";
pub const TAGGER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TaggerCheckpoint {
    format: String,
    version: u32,
    arch: TaggerArch,
    vocabulary: Vocabulary,
    tags: Vec<String>,
    params: Vec<f64>,
}

fn mean_loss(model: &TaggerModel, data: &[LabeledUtterance]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for u in data {
        let (gold, _) = model.encode_tags(&u.labels);
        total += model.loss(&u.tokens, &gold);
        n += gold.len();
    }
    total / n.max(1) as f64
}

pub fn train_tagger(
    data: &[LabeledUtterance],
    cfg: &TaggerConfig,
) -> Result<(TaggerModel, TaggerTrainReport)> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for u in data {
        u.check()?;
    }
    if !(0.0..1.0).contains(&cfg.dropout) || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("dropout in [0,1), batch_size >= 1".into()));
    }
    let vocab = Vocabulary::build(data.iter().map(|u| u.tokens.as_slice()), cfg.min_freq)?;
    let mut tagset: BTreeSet<String> = data.iter().flat_map(|u| u.labels.iter().cloned()).collect();
    tagset.remove(OUTSIDE);
    let tags: Vec<String> = std::iter::once(OUTSIDE.to_string()).chain(tagset).collect();
    let arch = TaggerArch {
        window: cfg.window,
        emb_dim: cfg.emb_dim,
        hidden: cfg.hidden,
    };
    let mut model = TaggerModel::new(arch, vocab, tags, cfg.seed)?;
    let encoded: Vec<Vec<usize>> = data.iter().map(|u| model.encode_tags(&u.labels).0).collect();
    let initial_loss = mean_loss(&model, data);

    let mut opt = Adam::new(
        model.params.len(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
    );
    let mut rng = rng::named_rng(cfg.seed, "tagger-train");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch_size) {
            let n_tok: usize = batch.iter().map(|&i| data[i].len()).sum();
            let scale = 1.0 / n_tok as f64;
            grad.fill(0.0);
            for &i in batch {
                total += model.loss_and_grad(
                    &data[i].tokens,
                    &encoded[i],
                    scale,
                    &mut grad,
                    Some((cfg.dropout, &mut rng)),
                );
            }
            count += n_tok;
            opt.step(&mut model.params, &grad);
        }
        epoch_losses.push(total / count as f64);
    }
    let final_loss = mean_loss(&model, data);
    Ok((
        model,
        TaggerTrainReport {
            epoch_losses,
            initial_loss,
            final_loss,
        },
    ))
}

/// Predictions for many utterances, in input order.
pub fn predict_all<L: SequenceLabeler + ?Sized>(
    labeler: &L,
    items: &[LabeledUtterance],
) -> Vec<Vec<String>> {
    use rayon::prelude::*;
    items.par_iter().map(|u| labeler.predict(&u.tokens)).collect()
}
