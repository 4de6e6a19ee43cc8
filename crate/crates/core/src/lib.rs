//! Perturbation-robust slot filling by structure-aware augmentation.
//!
//! Two masked language models are pre-trained on an unlabeled perturbation
//! corpus (word masking and LDA-guided context masking), used to rewrite
//! clean slot-filling samples, and the rewrites are filtered by a
//! consistency tagger before training the downstream labeler. Robustness is
//! measured with span F1 and the perturbation recovery rate.

pub mod augmentor;
pub mod config;
pub mod consistency;
pub mod corpus;
pub mod error;
pub mod fixture;
pub mod metrics;
pub mod mlm;
pub mod nn;
pub mod perturbers;
pub mod pipeline;
pub mod rng;
pub mod tagger;
pub mod topic_keywords;
pub mod vocab;

pub use corpus::{Dataset, LabeledUtterance, Token, UnlabeledUtterance};
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use mlm::{MaskMode, MlmModel};
pub use tagger::TaggerModel;
pub use topic_keywords::TopicModel;
pub use vocab::Vocabulary;
