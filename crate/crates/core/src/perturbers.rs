//! Rule-based perturbations: character noise, word deletion and insertion,
//! homophone and synonym substitution, appended distractors and sentence
//! concatenation. Used both as augmentation baselines and to build perturbed
//! test sets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    repair_bio, tokenize_raw, validate_bio, Dataset, HasTokens, LabeledUtterance, Tag, Token,
    OUTSIDE,
};
use crate::error::{Error, Result};
use crate::mlm::{infill, InfillParams, MaskMode, MlmModel};
use crate::rng::{self, Rng};
use crate::vocab::SPECIAL_TOKENS;

/// Declaration order is the canonical application order: structural kinds
/// first, then substitutions, then edits that change length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    ConcatSent,
    AppendIrr,
    HomSub,
    SynSub,
    CharRandom,
    WordInsert,
    WordDel,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 7] = [
        PerturbKind::ConcatSent,
        PerturbKind::AppendIrr,
        PerturbKind::HomSub,
        PerturbKind::SynSub,
        PerturbKind::CharRandom,
        PerturbKind::WordInsert,
        PerturbKind::WordDel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbKind::ConcatSent => "concat_sent",
            PerturbKind::AppendIrr => "append_irr",
            PerturbKind::HomSub => "hom_sub",
            PerturbKind::SynSub => "syn_sub",
            PerturbKind::CharRandom => "char_random",
            PerturbKind::WordInsert => "word_insert",
            PerturbKind::WordDel => "word_del",
        }
    }

    /// Structural kinds append material once per application; `p` does not
    /// apply to them.
    pub fn is_structural(&self) -> bool {
        matches!(self, PerturbKind::ConcatSent | PerturbKind::AppendIrr)
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown perturbation kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub transform_prob: f64,
    pub protect_slots: bool,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, transform_prob: f64, protect_slots: bool, seed: u64) -> Self {
        PerturbSpec {
            kind,
            transform_prob,
            protect_slots,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.transform_prob > 0.0 && self.transform_prob < 1.0) && !self.kind.is_structural() {
            return Err(Error::InvalidArgument(format!(
                "{}: transform_prob must be in (0,1), got {}",
                self.kind, self.transform_prob
            )));
        }
        Ok(())
    }
}

/// `word<TAB>alt1,alt2,...` per line; `#` starts a comment line. Keys are
/// matched case-insensitively.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, alts) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidArgument(format!("lexicon line {}: expected word<TAB>alternatives", n + 1))
            })?;
            let alts: Vec<String> = alts
                .split(',')
                .map(|a| a.split_whitespace().collect::<Vec<_>>().join(" "))
                .filter(|a| !a.is_empty())
                .collect();
            if word.trim().is_empty() || alts.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "lexicon line {}: empty word or alternatives",
                    n + 1
                )));
            }
            entries.insert(word.trim().to_lowercase(), alts);
        }
        Ok(Lexicon { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::parse(&text)
    }

    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: Into<String>,
    {
        Lexicon {
            entries: pairs
                .into_iter()
                .map(|(w, alts)| (w.into().to_lowercase(), alts.into_iter().map(Into::into).collect()))
                .collect(),
        }
    }

    pub fn sample_homophones() -> Self {
        Lexicon::parse(&crate::fixture::homophone_lexicon_text()).expect("bundled lexicon parses")
    }

    pub fn sample_synonyms() -> Self {
        Lexicon::parse(&crate::fixture::synonym_lexicon_text()).expect("bundled lexicon parses")
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Everything the perturbers may draw from. Missing pieces are only an
/// error for the kinds that need them.
#[derive(Debug, Clone, Default)]
pub struct PerturbResources {
    pub homophones: Option<Lexicon>,
    pub synonyms: Option<Lexicon>,
    pub distractors: Vec<Vec<Token>>,
    pub concat_pool: Vec<LabeledUtterance>,
    pub mlm: Option<MlmModel>,
}

impl PerturbResources {
    pub fn check(&self, kind: PerturbKind) -> Result<()> {
        let missing = |what: &str| Err(Error::MissingResource(format!("{kind} requires {what}")));
        match kind {
            PerturbKind::HomSub if self.homophones.is_none() => missing("a homophone lexicon"),
            PerturbKind::SynSub if self.synonyms.is_none() => missing("a synonym lexicon"),
            PerturbKind::AppendIrr if self.distractors.is_empty() => missing("a distractor pool"),
            PerturbKind::ConcatSent if self.concat_pool.is_empty() => missing("a concatenation pool"),
            PerturbKind::WordInsert if self.mlm.is_none() => missing("a word-masking MLM"),
            _ => Ok(()),
        }
    }

    /// Reads a distractor pool, one utterance per line.
    pub fn load_distractors(path: impl AsRef<Path>) -> Result<Vec<Vec<Token>>> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(text
            .lines()
            .map(tokenize_raw)
            .filter(|t| !t.is_empty())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCount {
    /// Positions (or gaps) the kind could have acted on.
    pub eligible: usize,
    /// How many it did act on.
    pub acted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedSample {
    pub id: String,
    pub source_id: String,
    pub tokens: Vec<Token>,
    pub labels: Vec<String>,
    pub applied: Vec<PerturbKind>,
    pub edits: BTreeMap<PerturbKind, EditCount>,
}

impl HasTokens for PerturbedSample {
    fn id(&self) -> &str {
        &self.id
    }
    fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

impl PerturbedSample {
    pub fn to_labeled(&self) -> Result<LabeledUtterance> {
        LabeledUtterance::new(self.id.clone(), self.tokens.clone(), self.labels.clone())
    }
}

struct Work {
    tokens: Vec<Token>,
    labels: Vec<String>,
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn random_letter(rng: &mut Rng, avoid: Option<char>) -> char {
    loop {
        let c = *ALPHABET.choose(rng).expect("non-empty") as char;
        if Some(c) != avoid {
            return c;
        }
    }
}

/// One insert, delete or replace at a uniformly chosen position.
fn char_edit(token: &Token, rng: &mut Rng) -> Token {
    let mut chars: Vec<char> = token.chars().collect();
    let n = chars.len();
    // A single character cannot be deleted without emptying the token.
    let op = if n == 1 {
        [0, 2][rng.random_range(0..2)]
    } else {
        rng.random_range(0..3)
    };
    match op {
        0 => {
            let at = rng.random_range(0..=n);
            chars.insert(at, random_letter(rng, None));
        }
        1 => {
            chars.remove(rng.random_range(0..n));
        }
        _ => {
            let at = rng.random_range(0..n);
            chars[at] = random_letter(rng, Some(chars[at]));
        }
    }
    Token::new(chars.into_iter().collect::<String>()).expect("edited token stays non-empty")
}

/// Labels for a replacement that spans `len` tokens.
fn spread_label(label: &str, len: usize) -> Vec<String> {
    match Tag::parse(label) {
        Some(Tag::Begin(t)) => std::iter::once(label.to_string())
            .chain(std::iter::repeat_n(format!("I-{t}"), len - 1))
            .collect(),
        _ => vec![label.to_string(); len],
    }
}

fn substitute(w: &mut Work, lex: &Lexicon, spec: &PerturbSpec, rng: &mut Rng) -> EditCount {
    let mut count = EditCount::default();
    let mut tokens = Vec::with_capacity(w.tokens.len());
    let mut labels = Vec::with_capacity(w.labels.len());
    for (t, l) in w.tokens.iter().zip(&w.labels) {
        let alts = lex.get(t).filter(|_| !spec.protect_slots || l == OUTSIDE);
        if let Some(alts) = alts {
            count.eligible += 1;
            if rng.random::<f64>() < spec.transform_prob {
                count.acted += 1;
                let alt = alts.choose(rng).expect("lexicon entries are non-empty");
                let words: Vec<Token> = alt
                    .split_whitespace()
                    .map(|s| Token::new(s).expect("whitespace-split"))
                    .collect();
                labels.extend(spread_label(l, words.len()));
                tokens.extend(words);
                continue;
            }
        }
        tokens.push(t.clone());
        labels.push(l.clone());
    }
    w.tokens = tokens;
    w.labels = labels;
    count
}

fn word_insert(w: &mut Work, model: &MlmModel, spec: &PerturbSpec, rng: &mut Rng) -> Result<EditCount> {
    let n = w.tokens.len();
    let mut count = EditCount::default();
    let budget = model.config.max_len.saturating_sub(2).saturating_sub(n);
    let mut gaps = Vec::new();
    // Interior gap g sits between tokens g and g+1.
    for g in 0..n.saturating_sub(1) {
        let inside_slot = matches!(Tag::parse(&w.labels[g + 1]), Some(Tag::Inside(_)));
        if spec.protect_slots && inside_slot {
            continue;
        }
        count.eligible += 1;
        if rng.random::<f64>() < spec.transform_prob && gaps.len() < budget {
            gaps.push(g);
        }
    }
    count.acted = gaps.len();
    if gaps.is_empty() {
        return Ok(count);
    }
    let placeholder = Token::new(SPECIAL_TOKENS[crate::vocab::MASK]).expect("no whitespace");
    let mut tokens = Vec::with_capacity(n + gaps.len());
    let mut labels = Vec::with_capacity(n + gaps.len());
    let mut masks = Vec::with_capacity(gaps.len());
    let mut next = gaps.iter().peekable();
    for i in 0..n {
        tokens.push(w.tokens[i].clone());
        labels.push(w.labels[i].clone());
        if next.peek() == Some(&&i) {
            next.next();
            masks.push(tokens.len());
            tokens.push(placeholder.clone());
            labels.push(OUTSIDE.to_string());
        }
    }
    let params = InfillParams {
        temperature: 1.0,
        ..Default::default()
    };
    let out = infill(model, &tokens, &masks, MaskMode::Word, &params, rng.random())?;
    w.tokens = out.tokens;
    w.labels = repair_bio(&labels);
    Ok(count)
}

fn word_del(w: &mut Work, spec: &PerturbSpec, rng: &mut Rng) -> EditCount {
    let mut count = EditCount::default();
    let mut delete = vec![false; w.tokens.len()];
    for (i, l) in w.labels.iter().enumerate() {
        if spec.protect_slots && l != OUTSIDE {
            continue;
        }
        count.eligible += 1;
        delete[i] = rng.random::<f64>() < spec.transform_prob;
    }
    if delete.iter().all(|d| *d) {
        delete[0] = false;
    }
    count.acted = delete.iter().filter(|d| **d).count();
    fn keep<T: Clone>(v: &[T], delete: &[bool]) -> Vec<T> {
        v.iter()
            .zip(delete)
            .filter(|(_, d)| !**d)
            .map(|(x, _)| x.clone())
            .collect()
    }
    w.tokens = keep(&w.tokens, &delete);
    let labels = keep(&w.labels, &delete);
    w.labels = repair_bio(&labels);
    count
}

fn char_random(w: &mut Work, spec: &PerturbSpec, rng: &mut Rng) -> EditCount {
    let mut count = EditCount::default();
    for (t, l) in w.tokens.iter_mut().zip(&w.labels) {
        if spec.protect_slots && l != OUTSIDE {
            continue;
        }
        count.eligible += 1;
        if rng.random::<f64>() < spec.transform_prob {
            count.acted += 1;
            *t = char_edit(t, rng);
        }
    }
    count
}

fn apply_once(
    w: &mut Work,
    source_id: &str,
    spec: &PerturbSpec,
    res: &PerturbResources,
    rng: &mut Rng,
) -> Result<EditCount> {
    Ok(match spec.kind {
        PerturbKind::ConcatSent => {
            // Prefer a different utterance than the source.
            let others: Vec<&LabeledUtterance> =
                res.concat_pool.iter().filter(|u| u.id != source_id).collect();
            let pick = match others.choose(rng) {
                Some(u) => *u,
                None => res.concat_pool.choose(rng).expect("checked non-empty"),
            };
            w.tokens.extend(pick.tokens.iter().cloned());
            w.labels.extend(pick.labels.iter().cloned());
            EditCount { eligible: 1, acted: 1 }
        }
        PerturbKind::AppendIrr => {
            let d = res.distractors.choose(rng).expect("checked non-empty");
            w.tokens.extend(d.iter().cloned());
            w.labels.extend(std::iter::repeat_n(OUTSIDE.to_string(), d.len()));
            EditCount { eligible: 1, acted: 1 }
        }
        PerturbKind::HomSub => substitute(w, res.homophones.as_ref().expect("checked"), spec, rng),
        PerturbKind::SynSub => substitute(w, res.synonyms.as_ref().expect("checked"), spec, rng),
        PerturbKind::CharRandom => char_random(w, spec, rng),
        PerturbKind::WordInsert => word_insert(w, res.mlm.as_ref().expect("checked"), spec, rng)?,
        PerturbKind::WordDel => word_del(w, spec, rng),
    })
}

/// One application of a single kind with no identity retry; the edit count
/// reflects exactly what this draw did.
pub fn apply_kind(
    tokens: &[Token],
    labels: &[String],
    source_id: &str,
    spec: &PerturbSpec,
    res: &PerturbResources,
    rng: &mut Rng,
) -> Result<(Vec<Token>, Vec<String>, EditCount)> {
    spec.validate()?;
    res.check(spec.kind)?;
    let mut w = Work {
        tokens: tokens.to_vec(),
        labels: labels.to_vec(),
    };
    let c = apply_once(&mut w, source_id, spec, res, rng)?;
    Ok((w.tokens, w.labels, c))
}

pub const DEFAULT_MAX_ATTEMPTS: usize = 10;

/// Applies `specs` in canonical order, retrying with fresh randomness until
/// the tokens differ from the source. `Ok(None)` when every attempt was an
/// identity.
pub fn compose(
    utterance: &LabeledUtterance,
    specs: &[PerturbSpec],
    res: &PerturbResources,
    max_attempts: usize,
) -> Result<Option<PerturbedSample>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no perturbation specs given".into()));
    }
    utterance.check()?;
    for s in specs {
        s.validate()?;
        res.check(s.kind)?;
    }
    let mut ordered = specs.to_vec();
    ordered.sort_by_key(|s| s.kind);
    for attempt in 0..max_attempts.max(1) {
        let mut w = Work {
            tokens: utterance.tokens.clone(),
            labels: utterance.labels.clone(),
        };
        let mut edits = BTreeMap::new();
        for s in &ordered {
            let name = format!("perturb/{}/{}/{attempt}", s.kind, utterance.id);
            let mut rng = rng::named_rng(s.seed, &name);
            let c = apply_once(&mut w, &utterance.id, s, res, &mut rng)?;
            let e: &mut EditCount = edits.entry(s.kind).or_default();
            e.eligible += c.eligible;
            e.acted += c.acted;
        }
        debug_assert!(validate_bio(&w.labels).is_valid());
        if w.tokens != utterance.tokens {
            return Ok(Some(PerturbedSample {
                id: utterance.id.clone(),
                source_id: utterance.id.clone(),
                tokens: w.tokens,
                labels: w.labels,
                applied: ordered.iter().map(|s| s.kind).collect(),
                edits,
            }));
        }
    }
    Ok(None)
}

pub fn perturb(
    utterance: &LabeledUtterance,
    spec: &PerturbSpec,
    res: &PerturbResources,
) -> Result<Option<PerturbedSample>> {
    compose(utterance, std::slice::from_ref(spec), res, DEFAULT_MAX_ATTEMPTS)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbStats {
    pub sources: usize,
    pub emitted: usize,
    /// Utterances for which no attempt changed the tokens.
    pub dropped_identity: usize,
}

/// Perturbs every utterance; ids keep the source id so predictions can be
/// traced back.
pub fn perturb_dataset(
    dataset: &Dataset<LabeledUtterance>,
    specs: &[PerturbSpec],
    res: &PerturbResources,
) -> Result<(Dataset<PerturbedSample>, PerturbStats)> {
    use rayon::prelude::*;
    let results: Vec<Result<Option<PerturbedSample>>> = dataset
        .items
        .par_iter()
        .map(|u| compose(u, specs, res, DEFAULT_MAX_ATTEMPTS))
        .collect();
    let mut items = Vec::new();
    let mut stats = PerturbStats {
        sources: dataset.len(),
        ..Default::default()
    };
    for r in results {
        match r? {
            Some(s) => items.push(s),
            None => stats.dropped_identity += 1,
        }
    }
    stats.emitted = items.len();
    Ok((Dataset::new(dataset.split_name.clone(), items)?, stats))
}

/// JSON Lines with `id`, `tokens`, `labels` plus the `applied` sidecar;
/// readable by the corpus JSON Lines reader.
pub fn write_perturbed(data: &Dataset<PerturbedSample>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for s in &data.items {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}
