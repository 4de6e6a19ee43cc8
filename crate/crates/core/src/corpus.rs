//! Utterances, BIO validation and dataset persistence (CoNLL two-column and
//! JSON Lines).

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

/// A single whitespace-free, non-empty token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Token(String);

impl Token {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(Error::InvalidToken(text));
        }
        Ok(Token(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Token {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Token::new(value)
    }
}

impl From<Token> for String {
    fn from(t: Token) -> String {
        t.0
    }
}

impl Deref for Token {
    type Target = str;

    fn deref(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Builds tokens from string slices, failing on the first invalid one.
pub fn tokens<S: AsRef<str>>(words: &[S]) -> Result<Vec<Token>> {
    words.iter().map(|w| Token::new(w.as_ref())).collect()
}

/// Parsed view of a BIO tag string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(label: &'a str) -> Option<Tag<'a>> {
        if label == OUTSIDE {
            return Some(Tag::Outside);
        }
        let (prefix, ty) = label.split_at_checked(2)?;
        if ty.is_empty() || ty.chars().any(char::is_whitespace) {
            return None;
        }
        match prefix {
            "B-" => Some(Tag::Begin(ty)),
            "I-" => Some(Tag::Inside(ty)),
            _ => None,
        }
    }

    pub fn slot_type(&self) -> Option<&'a str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BioViolation {
    Malformed,
    InsideWithoutOpener,
    TypeMismatch,
}

impl fmt::Display for BioViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BioViolation::Malformed => "malformed tag",
            BioViolation::InsideWithoutOpener => "I without opener",
            BioViolation::TypeMismatch => "type mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BioVerdict {
    Valid,
    Invalid { index: usize, reason: BioViolation },
}

impl BioVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, BioVerdict::Valid)
    }
}

pub fn validate_bio<S: AsRef<str>>(labels: &[S]) -> BioVerdict {
    let mut prev: Option<Tag<'_>> = None;
    for (index, label) in labels.iter().enumerate() {
        let Some(tag) = Tag::parse(label.as_ref()) else {
            return BioVerdict::Invalid {
                index,
                reason: BioViolation::Malformed,
            };
        };
        if let Tag::Inside(ty) = tag {
            match prev.and_then(|p| p.slot_type()) {
                None => {
                    return BioVerdict::Invalid {
                        index,
                        reason: BioViolation::InsideWithoutOpener,
                    }
                }
                Some(prev_ty) if prev_ty != ty => {
                    return BioVerdict::Invalid {
                        index,
                        reason: BioViolation::TypeMismatch,
                    }
                }
                Some(_) => {}
            }
        }
        prev = Some(tag);
    }
    BioVerdict::Valid
}

/// Rewrites every invalid `I-t` to `B-t`. Malformed tags become `O`.
pub fn repair_bio<S: AsRef<str>>(labels: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(labels.len());
    let mut prev_ty: Option<String> = None;
    for label in labels {
        let label = label.as_ref();
        let fixed = match Tag::parse(label) {
            None => OUTSIDE.to_string(),
            Some(Tag::Inside(ty)) if prev_ty.as_deref() != Some(ty) => format!("B-{ty}"),
            Some(_) => label.to_string(),
        };
        prev_ty = Tag::parse(&fixed)
            .and_then(|t| t.slot_type())
            .map(str::to_string);
        out.push(fixed);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub id: String,
    pub tokens: Vec<Token>,
    pub labels: Vec<String>,
}

impl LabeledUtterance {
    pub fn new(id: impl Into<String>, tokens: Vec<Token>, labels: Vec<String>) -> Result<Self> {
        let utt = LabeledUtterance {
            id: id.into(),
            tokens,
            labels,
        };
        utt.check()?;
        Ok(utt)
    }

    /// Convenience constructor from whitespace-separated strings.
    pub fn parse(id: &str, words: &str, labels: &str) -> Result<Self> {
        let toks = words
            .split_whitespace()
            .map(Token::new)
            .collect::<Result<Vec<_>>>()?;
        let labels = labels.split_whitespace().map(str::to_string).collect();
        Self::new(id, toks, labels)
    }

    pub fn check(&self) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() != self.labels.len() {
            return Err(Error::LengthMismatch {
                id: self.id.clone(),
                tokens: self.tokens.len(),
                labels: self.labels.len(),
            });
        }
        match validate_bio(&self.labels) {
            BioVerdict::Valid => Ok(()),
            BioVerdict::Invalid { index, reason } => Err(Error::InvalidBio {
                id: self.id.clone(),
                index,
                reason: reason.to_string(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(Token::as_str).collect()
    }

    pub fn has_slots(&self) -> bool {
        self.labels.iter().any(|l| l != OUTSIDE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledUtterance {
    pub id: String,
    pub tokens: Vec<Token>,
}

impl UnlabeledUtterance {
    pub fn new(id: impl Into<String>, tokens: Vec<Token>) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::LengthMismatch {
                id,
                tokens: 0,
                labels: 0,
            });
        }
        Ok(UnlabeledUtterance { id, tokens })
    }

    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(Token::as_str).collect()
    }
}

/// Anything that exposes an id and a token sequence.
pub trait HasTokens {
    fn id(&self) -> &str;
    fn tokens(&self) -> &[Token];
}

impl HasTokens for LabeledUtterance {
    fn id(&self) -> &str {
        &self.id
    }
    fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

impl HasTokens for UnlabeledUtterance {
    fn id(&self) -> &str {
        &self.id
    }
    fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset<T> {
    pub split_name: String,
    pub items: Vec<T>,
}

impl<T: HasTokens> Dataset<T> {
    pub fn new(split_name: impl Into<String>, items: Vec<T>) -> Result<Self> {
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.id().to_string()) {
                return Err(Error::DuplicateId(item.id().to_string()));
            }
        }
        Ok(Dataset {
            split_name: split_name.into(),
            items,
        })
    }
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.items.iter()
    }
}

impl Dataset<LabeledUtterance> {
    /// Drops the labels, keeping ids and order.
    pub fn to_unlabeled(&self) -> Dataset<UnlabeledUtterance> {
        Dataset {
            split_name: self.split_name.clone(),
            items: self
                .items
                .iter()
                .map(|u| UnlabeledUtterance {
                    id: u.id.clone(),
                    tokens: u.tokens.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// `token<TAB>label` per line, blank line between utterances.
    Conll,
    /// One JSON object per line: `id`, `tokens`, `labels`.
    JsonLines,
    /// One raw utterance per line, tokenized with [`tokenize_raw`]. Unlabeled only.
    RawText,
}

impl Format {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::JsonLines,
            Some("txt") => Format::RawText,
            _ => Format::Conll,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReadOptions {
    /// Repair invalid BIO sequences instead of rejecting them.
    pub repair: bool,
    /// Split name; defaults to the file stem.
    pub split_name: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

const ID_COMMENT: &str = "# id = ";

fn split_name_for(path: &Path, opts: &ReadOptions) -> String {
    opts.split_name.clone().unwrap_or_else(|| {
        path.file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("data")
            .to_string()
    })
}

fn synth_id(split: &str, index: usize) -> String {
    format!("{split}-{index}")
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(path, e)))))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn finish_labeled(
    path: &Path,
    line: usize,
    id: String,
    words: Vec<String>,
    labels: Vec<String>,
    repair: bool,
) -> Result<LabeledUtterance> {
    let toks = words
        .into_iter()
        .map(Token::new)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| parse_err(path, line, e.to_string()))?;
    let labels = if repair { repair_bio(&labels) } else { labels };
    LabeledUtterance::new(id, toks, labels)
}

pub fn read_dataset(
    path: impl AsRef<Path>,
    format: Format,
    opts: &ReadOptions,
) -> Result<Dataset<LabeledUtterance>> {
    let path = path.as_ref();
    let split = split_name_for(path, opts);
    let mut items = Vec::new();
    match format {
        Format::Conll => {
            let mut words = Vec::new();
            let mut labels = Vec::new();
            let mut pending_id: Option<String> = None;
            let mut start_line = 1;
            let mut last_line = 0;
            for (lineno, line) in open_lines(path)? {
                let line = line?;
                last_line = lineno;
                if line.trim().is_empty() {
                    if !words.is_empty() {
                        let id = pending_id
                            .take()
                            .unwrap_or_else(|| synth_id(&split, items.len()));
                        items.push(finish_labeled(
                            path,
                            start_line,
                            id,
                            std::mem::take(&mut words),
                            std::mem::take(&mut labels),
                            opts.repair,
                        )?);
                    }
                    continue;
                }
                if !line.contains('\t') {
                    if let Some(id) = line.strip_prefix(ID_COMMENT) {
                        pending_id = Some(id.to_string());
                        continue;
                    }
                    return Err(parse_err(path, lineno, "expected token<TAB>label"));
                }
                let mut parts = line.split('\t');
                let (Some(w), Some(l), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(parse_err(path, lineno, "expected exactly two columns"));
                };
                if words.is_empty() {
                    start_line = lineno;
                }
                words.push(w.to_string());
                labels.push(l.to_string());
            }
            if !words.is_empty() {
                let id = pending_id.unwrap_or_else(|| synth_id(&split, items.len()));
                items.push(finish_labeled(
                    path,
                    start_line.min(last_line.max(1)),
                    id,
                    words,
                    labels,
                    opts.repair,
                )?);
            }
        }
        Format::JsonLines => {
            for (lineno, line) in open_lines(path)? {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonRecord = serde_json::from_str(&line)
                    .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                let labels = rec
                    .labels
                    .ok_or_else(|| parse_err(path, lineno, "missing labels"))?;
                let id = rec.id.unwrap_or_else(|| synth_id(&split, items.len()));
                items.push(finish_labeled(
                    path,
                    lineno,
                    id,
                    rec.tokens,
                    labels,
                    opts.repair,
                )?);
            }
        }
        Format::RawText => {
            return Err(Error::InvalidArgument(
                "raw text carries no labels; use read_unlabeled".into(),
            ))
        }
    }
    Dataset::new(split, items)
}

pub fn read_unlabeled(
    path: impl AsRef<Path>,
    format: Format,
    opts: &ReadOptions,
) -> Result<Dataset<UnlabeledUtterance>> {
    let path = path.as_ref();
    let split = split_name_for(path, opts);
    match format {
        Format::Conll => Ok(read_dataset(path, format, opts)?.to_unlabeled()),
        Format::JsonLines => {
            let mut items = Vec::new();
            for (lineno, line) in open_lines(path)? {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonRecord = serde_json::from_str(&line)
                    .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                let toks = rec
                    .tokens
                    .into_iter()
                    .map(Token::new)
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                let id = rec.id.unwrap_or_else(|| synth_id(&split, items.len()));
                items.push(UnlabeledUtterance::new(id, toks)?);
            }
            Dataset::new(split, items)
        }
        Format::RawText => {
            let mut items = Vec::new();
            for (_, line) in open_lines(path)? {
                let toks = tokenize_raw(&line?);
                if toks.is_empty() {
                    continue;
                }
                let id = synth_id(&split, items.len());
                items.push(UnlabeledUtterance::new(id, toks)?);
            }
            Dataset::new(split, items)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_dataset(
    data: &Dataset<LabeledUtterance>,
    path: impl AsRef<Path>,
    format: Format,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    match format {
        Format::Conll => {
            for (i, u) in data.items.iter().enumerate() {
                if u.id != synth_id(&data.split_name, i) {
                    writeln!(w, "{ID_COMMENT}{}", u.id).map_err(io)?;
                }
                for (t, l) in u.tokens.iter().zip(&u.labels) {
                    writeln!(w, "{t}\t{l}").map_err(io)?;
                }
                writeln!(w).map_err(io)?;
            }
        }
        Format::JsonLines => {
            for u in &data.items {
                let rec = JsonRecord {
                    id: Some(u.id.clone()),
                    tokens: u.tokens.iter().map(|t| t.to_string()).collect(),
                    labels: Some(u.labels.clone()),
                };
                serde_json::to_writer(&mut w, &rec)?;
                writeln!(w).map_err(io)?;
            }
        }
        Format::RawText => {
            for u in &data.items {
                writeln!(w, "{}", u.words().join(" ")).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn write_unlabeled(data: &Dataset<UnlabeledUtterance>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for u in &data.items {
        let rec = JsonRecord {
            id: Some(u.id.clone()),
            tokens: u.tokens.iter().map(|t| t.to_string()).collect(),
            labels: None,
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tokenizes a raw social-media style line: lowercase, whitespace split,
/// URL-like tokens and symbol-only tokens (emoji, decorations) removed.
/// Single-character punctuation survives.
pub fn tokenize_raw(text: &str) -> Vec<Token> {
    text.to_lowercase()
        .split_whitespace()
        .filter(|w| !w.starts_with("http"))
        .filter(|w| {
            w.chars().any(char::is_alphanumeric)
                || (w.chars().count() == 1 && w.chars().all(|c| c.is_ascii_punctuation()))
        })
        .filter_map(|w| Token::new(w).ok())
        .collect()
}
