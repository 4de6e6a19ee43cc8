//! Pipeline configuration: one JSON document with a section per stage.
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augmentor::AugmentConfig;
use crate::error::{Error, Result};
use crate::mlm::{MlmConfig, MlmTrainConfig};
use crate::perturbers::PerturbKind;
use crate::tagger::TaggerConfig;
use crate::topic_keywords::LdaConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Unlabeled perturbation corpus (JSON Lines, CoNLL or raw text).
    pub corpus: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub homophones: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub distractors: Option<PathBuf>,
    /// Ready-made perturbed test sets, evaluated alongside generated ones.
    pub perturbed_tests: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub model: MlmConfig,
    pub train: MlmTrainConfig,
    pub min_freq: usize,
    pub keep_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            model: MlmConfig::default(),
            train: MlmTrainConfig::default(),
            min_freq: 1,
            keep_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbStep {
    pub kind: PerturbKind,
    pub transform_prob: f64,
    pub protect_slots: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSet {
    pub name: String,
    pub steps: Vec<PerturbStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSection {
    pub sets: Vec<PerturbSet>,
}

impl Default for PerturbSection {
    fn default() -> Self {
        let step = |kind, protect_slots| PerturbStep {
            kind,
            transform_prob: 0.3,
            protect_slots,
        };
        PerturbSection {
            sets: vec![PerturbSet {
                name: "mixed".into(),
                steps: vec![
                    step(PerturbKind::HomSub, false),
                    step(PerturbKind::WordDel, true),
                    step(PerturbKind::AppendIrr, true),
                ],
            }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    /// Run consistency filtering; when off every augmented sample is used.
    pub consistency_filter: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            consistency_filter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Every random stream in every stage derives from this seed; the
    /// per-section `seed` fields are overwritten with derived values.
    pub seed: u64,
    pub paths: Paths,
    pub lda: LdaConfig,
    pub pretrain: PretrainSection,
    pub augment: AugmentConfig,
    pub filter: TaggerConfig,
    pub tagger: TaggerConfig,
    pub perturb: PerturbSection,
    pub stages: StageToggles,
    /// Free-form remarks; ignored by every stage and by the config hash.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 13,
            paths: Paths {
                output_dir: PathBuf::from("runs"),
                ..Default::default()
            },
            lda: LdaConfig::default(),
            pretrain: PretrainSection::default(),
            augment: AugmentConfig::default(),
            filter: TaggerConfig::default(),
            tagger: TaggerConfig::default(),
            perturb: PerturbSection::default(),
            stages: StageToggles::default(),
            notes: BTreeMap::new(),
        }
    }
}

/// Where each default comes from: a published setting or a local choice.
pub fn default_annotations() -> BTreeMap<String, String> {
    let published = "published setting";
    let chosen = "implementation default; the method description leaves it open";
    [
        ("augment.transform_prob", published.to_string()),
        ("perturb.sets[].steps[].transform_prob", published.to_string()),
        ("tagger.dropout", published.to_string()),
        ("filter.dropout", published.to_string()),
        ("pretrain.train.batch_size", published.to_string()),
        (
            "pretrain.train.learning_rate",
            "deviation: the published 1e-5 is a fine-tuning rate for a large pretrained model; 3e-4 trains this small model from scratch".to_string(),
        ),
        ("pretrain.train.mask_rate", chosen.to_string()),
        ("pretrain.train.max_span_len", chosen.to_string()),
        ("pretrain.keep_fraction", chosen.to_string()),
        ("pretrain.model", "small encoder standing in for a large pretrained seq2seq model".to_string()),
        ("lda", "common LDA defaults (K=20, alpha=50/K, beta=0.01, 500 sweeps)".to_string()),
        ("augment.copies_per_mode", chosen.to_string()),
        ("augment.word_temperature", chosen.to_string()),
        ("augment.context_temperature", chosen.to_string()),
        ("augment.span_len", chosen.to_string()),
        (
            "tagger",
            "window feed-forward tagger standing in for a BiLSTM; epochs and learning rate are local choices".to_string(),
        ),
        (
            "perturb.sets",
            "homophones also hit slot words; deletions and distractors leave slots intact".to_string(),
        ),
        ("seed", "section seeds are derived from this one".to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Sets a dotted key (`augment.transform_prob`) to a value parsed as JSON,
/// falling back to a plain string.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("config key {key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::InvalidArgument("empty config key".into()))
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads a config and applies `key=value` overrides before
    /// deserializing, so overrides go through the same validation.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let (mut doc, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let doc: Value = serde_json::from_str(&text)?;
                (doc, p.parent().map(Path::to_path_buf))
            }
            None => (serde_json::to_value(PipelineConfig::default())?, None),
        };
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(doc)?;
        if let Some(base) = base {
            cfg.paths.resolve_against(&base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.pretrain.model.validate()?;
        self.pretrain.train.validate()?;
        if !(self.pretrain.keep_fraction > 0.0 && self.pretrain.keep_fraction < 1.0) {
            return Err(Error::InvalidArgument("pretrain.keep_fraction must be in (0,1)".into()));
        }
        if self.lda.num_topics == 0 {
            return Err(Error::InvalidArgument("lda.num_topics must be >= 1".into()));
        }
        let mut names = std::collections::HashSet::new();
        for set in &self.perturb.sets {
            if set.steps.is_empty() {
                return Err(Error::InvalidArgument(format!("perturb set {} has no steps", set.name)));
            }
            if !names.insert(set.name.as_str()) || self.paths.perturbed_tests.contains_key(&set.name) {
                return Err(Error::InvalidArgument(format!("duplicate perturb set name {}", set.name)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, notes excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.notes.clear();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_default_notes(mut self) -> Self {
        self.notes = default_annotations();
        self
    }
}

impl Paths {
    pub fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.train);
        fix(&mut self.test);
        fix(&mut self.output_dir);
        for p in [&mut self.homophones, &mut self.synonyms, &mut self.distractors]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for p in self.perturbed_tests.values_mut() {
            fix(p);
        }
    }
}
