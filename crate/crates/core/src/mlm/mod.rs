//! Tiny masked language model: encoder, training with word or context
//! masking, and infilling.

mod infill;
mod model;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub use infill::{infill, InfillOutput, InfillParams, SpanLenSampler};
pub use model::{ForwardCache, Layout, MlmConfig, MlmModel, ParamGroup};
pub use train::{
    choose_spans, corrupt_context, corrupt_word, frame, masked_recovery_accuracy, train_mlm,
    Corruption, MaskMode, MlmExample, MlmTrainConfig, MlmTrainReport,
};

pub const CHECKPOINT_FORMAT: &str = "slotaug-mlm";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: MlmConfig,
    vocabulary: Vocabulary,
    params: Vec<f64>,
}

impl MlmModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            vocabulary: self.vocab.clone(),
            params: self.params.clone(),
        };
        fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        MlmModel::from_parts(ck.config, ck.vocabulary, ck.params)
    }
}
