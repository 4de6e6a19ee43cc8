//! LDA topic model fitted by collapsed Gibbs sampling, and per-sentence
//! keyword scoring used to protect key information from context masking.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::HasTokens;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Sweeps used when folding an unseen sentence into a fitted model.
pub const FOLD_IN_SWEEPS: usize = 20;

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "to", "of", "in", "on", "for", "at", "by", "with", "from", "and", "or",
    "is", "are", "was", "be", "am", "i", "you", "me", "my", "we", "it", "this", "that", "do",
    "does", "can", "could", "would", "will", "please", "what", "there", "some", ".", ",", "?",
    "!",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdaConfig {
    pub num_topics: usize,
    /// Symmetric doc-topic prior; `None` means `50 / num_topics`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
    pub stopwords: Vec<String>,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            num_topics: 20,
            alpha: None,
            beta: 0.01,
            iterations: 500,
            seed: 0,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LdaConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.num_topics as f64)
    }
}

/// Fitted collapsed-Gibbs LDA state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicModel {
    pub num_topics: usize,
    pub vocab_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    pub stopwords: BTreeSet<String>,
    /// Row-major `num_topics × vocab_size`.
    pub topic_word_counts: Vec<u32>,
    pub topic_totals: Vec<u64>,
    /// Row-major `num_docs × num_topics`.
    pub doc_topic_counts: Vec<u32>,
    pub doc_ids: Vec<String>,
    /// Word ids of each fitted document (stopwords and unknowns removed).
    pub docs: Vec<Vec<u32>>,
    pub assignments: Vec<Vec<u16>>,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
    #[serde(skip)]
    doc_index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordMask {
    pub utterance_id: String,
    pub is_keyword: Vec<bool>,
}

impl KeywordMask {
    pub fn keyword_positions(&self) -> Vec<usize> {
        self.is_keyword
            .iter()
            .enumerate()
            .filter_map(|(i, k)| k.then_some(i))
            .collect()
    }
}

fn sample_topic(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return k;
        }
    }
    weights.len() - 1
}

pub fn fit_lda<T: HasTokens>(corpus: &[T], cfg: &LdaConfig) -> Result<TopicModel> {
    fit_lda_observed(corpus, cfg, |_, _| {})
}

/// Fits the model, calling `observer(sweep, &model)` after each sweep.
pub fn fit_lda_observed<T: HasTokens>(
    corpus: &[T],
    cfg: &LdaConfig,
    mut observer: impl FnMut(usize, &TopicModel),
) -> Result<TopicModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.num_topics < 2 || cfg.num_topics > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "num_topics must be >= 2, got {}",
            cfg.num_topics
        )));
    }
    let alpha = cfg.alpha();
    if !(alpha > 0.0 && cfg.beta > 0.0) {
        return Err(Error::InvalidArgument("alpha and beta must be positive".into()));
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let stopwords: BTreeSet<String> = cfg.stopwords.iter().cloned().collect();

    let mut vocabulary = Vec::new();
    let mut word_index = HashMap::new();
    let mut docs = Vec::with_capacity(corpus.len());
    for utt in corpus {
        let mut doc = Vec::new();
        for tok in utt.tokens() {
            if stopwords.contains(tok.as_str()) {
                continue;
            }
            let id = *word_index.entry(tok.to_string()).or_insert_with(|| {
                vocabulary.push(tok.to_string());
                vocabulary.len() - 1
            });
            doc.push(id as u32);
        }
        docs.push(doc);
    }
    if vocabulary.is_empty() {
        return Err(Error::EmptyVocabulary);
    }

    let k = cfg.num_topics;
    let v = vocabulary.len();
    let mut rng = rng::named_rng(cfg.seed, "lda-init");
    let mut model = TopicModel {
        num_topics: k,
        vocab_size: v,
        alpha,
        beta: cfg.beta,
        seed: cfg.seed,
        vocabulary,
        stopwords,
        topic_word_counts: vec![0; k * v],
        topic_totals: vec![0; k],
        doc_topic_counts: vec![0; docs.len() * k],
        doc_ids: corpus.iter().map(|u| u.id().to_string()).collect(),
        assignments: Vec::with_capacity(docs.len()),
        docs,
        word_index,
        doc_index: HashMap::new(),
    };
    model.rebuild_doc_index();
    for d in 0..model.docs.len() {
        let mut z = Vec::with_capacity(model.docs[d].len());
        for &w in &model.docs[d] {
            let t = rng.random_range(0..k);
            model.topic_word_counts[t * v + w as usize] += 1;
            model.topic_totals[t] += 1;
            model.doc_topic_counts[d * k + t] += 1;
            z.push(t as u16);
        }
        model.assignments.push(z);
    }

    let mut rng = rng::named_rng(cfg.seed, "lda-gibbs");
    let mut weights = vec![0.0; k];
    let vbeta = v as f64 * cfg.beta;
    for sweep in 0..cfg.iterations {
        for d in 0..model.docs.len() {
            for i in 0..model.docs[d].len() {
                let w = model.docs[d][i] as usize;
                let old = model.assignments[d][i] as usize;
                model.topic_word_counts[old * v + w] -= 1;
                model.topic_totals[old] -= 1;
                model.doc_topic_counts[d * k + old] -= 1;
                for (t, wt) in weights.iter_mut().enumerate() {
                    *wt = (f64::from(model.doc_topic_counts[d * k + t]) + alpha)
                        * (f64::from(model.topic_word_counts[t * v + w]) + cfg.beta)
                        / (model.topic_totals[t] as f64 + vbeta);
                }
                let new = sample_topic(&weights, &mut rng);
                model.topic_word_counts[new * v + w] += 1;
                model.topic_totals[new] += 1;
                model.doc_topic_counts[d * k + new] += 1;
                model.assignments[d][i] = new as u16;
            }
        }
        observer(sweep, &model);
    }
    Ok(model)
}

impl TopicModel {
    /// Builds a model directly from counts (no fitted documents).
    pub fn from_counts(
        vocabulary: Vec<String>,
        topic_word_counts: Vec<Vec<u32>>,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        let k = topic_word_counts.len();
        let v = vocabulary.len();
        if k < 2 || topic_word_counts.iter().any(|r| r.len() != v) {
            return Err(Error::InvalidArgument("count matrix shape".into()));
        }
        let topic_totals = topic_word_counts
            .iter()
            .map(|r| r.iter().map(|&c| u64::from(c)).sum())
            .collect();
        let mut m = TopicModel {
            num_topics: k,
            vocab_size: v,
            alpha,
            beta,
            seed: 0,
            vocabulary,
            stopwords: BTreeSet::new(),
            topic_word_counts: topic_word_counts.concat(),
            topic_totals,
            doc_topic_counts: Vec::new(),
            doc_ids: Vec::new(),
            docs: Vec::new(),
            assignments: Vec::new(),
            word_index: HashMap::new(),
            doc_index: HashMap::new(),
        };
        m.rebuild_indexes();
        Ok(m)
    }

    fn rebuild_doc_index(&mut self) {
        self.doc_index = self
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
    }

    fn rebuild_indexes(&mut self) {
        self.word_index = self
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        self.rebuild_doc_index();
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.word_index.get(word).copied()
    }

    /// Topic-word probability; `word = None` is an unseen word (prior only).
    pub fn phi(&self, topic: usize, word: Option<usize>) -> f64 {
        let count = word.map_or(0.0, |w| {
            f64::from(self.topic_word_counts[topic * self.vocab_size + w])
        });
        (count + self.beta)
            / (self.topic_totals[topic] as f64 + self.vocab_size as f64 * self.beta)
    }

    pub fn theta(&self, doc: usize) -> Vec<f64> {
        let k = self.num_topics;
        let row = &self.doc_topic_counts[doc * k..(doc + 1) * k];
        let len = self.docs[doc].len() as f64;
        row.iter()
            .map(|&c| (f64::from(c) + self.alpha) / (len + k as f64 * self.alpha))
            .collect()
    }

    /// Document-topic distribution for an unseen word sequence, sampled
    /// with topic-word counts frozen.
    pub fn fold_in(&self, words: &[&str], sweeps: usize, seed: u64) -> Vec<f64> {
        let k = self.num_topics;
        let ids: Vec<usize> = words
            .iter()
            .filter(|w| !self.stopwords.contains(**w))
            .filter_map(|w| self.word_id(w))
            .collect();
        let mut rng = rng::rng_from(seed);
        let mut doc_counts = vec![0u32; k];
        let mut z: Vec<usize> = ids
            .iter()
            .map(|_| {
                let t = rng.random_range(0..k);
                doc_counts[t] += 1;
                t
            })
            .collect();
        let mut weights = vec![0.0; k];
        for _ in 0..sweeps {
            for (i, &w) in ids.iter().enumerate() {
                doc_counts[z[i]] -= 1;
                for (t, wt) in weights.iter_mut().enumerate() {
                    *wt = (f64::from(doc_counts[t]) + self.alpha) * self.phi(t, Some(w));
                }
                z[i] = sample_topic(&weights, &mut rng);
                doc_counts[z[i]] += 1;
            }
        }
        let len = ids.len() as f64;
        doc_counts
            .iter()
            .map(|&c| (f64::from(c) + self.alpha) / (len + k as f64 * self.alpha))
            .collect()
    }

    fn theta_for(&self, utt: &dyn HasTokensDyn) -> Vec<f64> {
        let words: Vec<&str> = utt.token_strs();
        if let Some(&d) = self.doc_index.get(utt.utt_id()) {
            let filtered: Vec<u32> = words
                .iter()
                .filter(|w| !self.stopwords.contains(**w))
                .filter_map(|w| self.word_id(w).map(|i| i as u32))
                .collect();
            if filtered == self.docs[d] {
                return self.theta(d);
            }
        }
        let seed = rng::derive_seed(self.seed, &words.join(" "));
        self.fold_in(&words, FOLD_IN_SWEEPS, seed)
    }

    /// Verifies count matrices against the assignments.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let k = self.num_topics;
        let v = self.vocab_size;
        let mut tw = vec![0u32; k * v];
        let mut dt = vec![0u32; self.docs.len() * k];
        let mut freq = vec![0u64; v];
        for (d, (doc, z)) in self.docs.iter().zip(&self.assignments).enumerate() {
            if doc.len() != z.len() {
                return Err(format!("doc {d}: assignment length mismatch"));
            }
            for (&w, &t) in doc.iter().zip(z) {
                tw[t as usize * v + w as usize] += 1;
                dt[d * k + t as usize] += 1;
                freq[w as usize] += 1;
            }
        }
        if tw != self.topic_word_counts {
            return Err("topic-word counts disagree with assignments".into());
        }
        if dt != self.doc_topic_counts {
            return Err("doc-topic counts disagree with assignments".into());
        }
        for t in 0..k {
            let row: u64 = tw[t * v..(t + 1) * v].iter().map(|&c| u64::from(c)).sum();
            if row != self.topic_totals[t] {
                return Err(format!("topic {t}: row sum {row} != total"));
            }
        }
        for (w, &f) in freq.iter().enumerate() {
            let col: u64 = (0..k).map(|t| u64::from(tw[t * v + w])).sum();
            if col != f {
                return Err(format!("word {w}: column sum {col} != frequency {f}"));
            }
        }
        let total_tokens: usize = self.docs.iter().map(Vec::len).sum();
        if self.topic_totals.iter().sum::<u64>() != total_tokens as u64 {
            return Err("total token count not conserved".into());
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: TopicModel = serde_json::from_str(&text)?;
        m.rebuild_indexes();
        Ok(m)
    }
}

/// Object-safe view over [`HasTokens`] so scoring is not generic.
trait HasTokensDyn {
    fn utt_id(&self) -> &str;
    fn token_strs(&self) -> Vec<&str>;
}

impl<T: HasTokens> HasTokensDyn for T {
    fn utt_id(&self) -> &str {
        self.id()
    }
    fn token_strs(&self) -> Vec<&str> {
        self.tokens().iter().map(|t| t.as_str()).collect()
    }
}

/// Number of keyword positions for an utterance of length `n`.
pub fn keyword_count(n: usize, keep_fraction: f64) -> usize {
    // Guard against products like 0.3 * 10 landing a hair above an integer.
    ((keep_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Scores each position by `sum_k theta[k] * phi[k][w]` and marks the
/// `ceil(keep_fraction * N)` best as keywords; stopwords never qualify.
pub fn keyword_mask<T: HasTokens>(
    model: &TopicModel,
    utterance: &T,
    keep_fraction: f64,
) -> KeywordMask {
    let theta = model.theta_for(utterance);
    let words = utterance.token_strs();
    let n = words.len();
    let mut scored: Vec<(usize, f64)> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| !model.stopwords.contains(**w))
        .map(|(i, w)| {
            let wid = model.word_id(w);
            let s = theta
                .iter()
                .enumerate()
                .map(|(t, th)| th * model.phi(t, wid))
                .sum::<f64>();
            (i, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut is_keyword = vec![false; n];
    for &(i, _) in scored.iter().take(keyword_count(n, keep_fraction)) {
        is_keyword[i] = true;
    }
    KeywordMask {
        utterance_id: utterance.id().to_string(),
        is_keyword,
    }
}
