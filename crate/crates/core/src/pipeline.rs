//! Stage runner: pretrain → augment → filter → train → perturb → evaluate.
//! Each stage reads its inputs from disk, writes artifacts under
//! `<output_dir>/<stage>/` and records a manifest with digests of both.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::augmentor::{augment_dataset, read_augmented, write_augmented};
use crate::config::PipelineConfig;
use crate::consistency::{filter, FilterReport};
use crate::corpus::{read_dataset, read_unlabeled, Dataset, Format, LabeledUtterance, ReadOptions};
use crate::error::{Error, Result};
use crate::fixture;
use crate::metrics::{build_report, span_f1, EvalReport, MethodRun};
use crate::mlm::{train_mlm, MaskMode, MlmExample, MlmModel, MlmTrainConfig};
use crate::perturbers::{perturb_dataset, write_perturbed, Lexicon, PerturbKind, PerturbResources, PerturbSpec};
use crate::rng::derive_seed;
use crate::tagger::{predict_all, train_tagger, TaggerConfig, TaggerModel};
use crate::topic_keywords::{fit_lda, keyword_mask, TopicModel};
use crate::vocab::Vocabulary;

pub const BASELINE_NAME: &str = "baseline";
pub const METHOD_NAME: &str = "augmented";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Augment,
    Filter,
    Train,
    Perturb,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Pretrain,
        Stage::Augment,
        Stage::Filter,
        Stage::Train,
        Stage::Perturb,
        Stage::Evaluate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Augment => "augment",
            Stage::Filter => "filter",
            Stage::Train => "train",
            Stage::Perturb => "perturb",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Artifact file names, relative to the stage directory.
pub mod artifacts {
    pub const MANIFEST: &str = "manifest.json";
    pub const SUMMARY: &str = "summary.json";
    pub const LDA: &str = "lda.json";
    pub const RWM: &str = "rwm.json";
    pub const RCM: &str = "rcm.json";
    pub const AUGMENTED: &str = "augmented.jsonl";
    pub const KEPT: &str = "kept.jsonl";
    pub const FILTER_REPORT: &str = "report.json";
    pub const BASELINE_TAGGER: &str = "baseline.json";
    pub const METHOD_TAGGER: &str = "augmented.json";
    pub const EVAL_REPORT: &str = "report.json";
    pub const EVAL_TEXT: &str = "report.txt";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub version: u32,
    pub seed: u64,
    pub config_sha256: String,
    /// Path → SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// File name → SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub dir: PathBuf,
    pub summary: Value,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn stage_dir(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    cfg.paths.output_dir.join(stage.as_str())
}

/// Seed of a named random stream, derived from the global seed.
pub fn stream_seed(cfg: &PipelineConfig, name: &str) -> u64 {
    derive_seed(cfg.seed, name)
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    stage: Stage,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a PipelineConfig, stage: Stage) -> Result<Self> {
        let dir = stage_dir(cfg, stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Ctx {
            cfg,
            stage,
            dir,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    /// Records an input file, failing early when it is absent.
    fn input(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(Error::MissingResource(format!("{}", path.display())));
        }
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(path.to_path_buf())
    }

    fn upstream(&mut self, stage: Stage, name: &str) -> Result<PathBuf> {
        let p = stage_dir(self.cfg, stage).join(name);
        self.input(&p)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.output(name);
        let text = serde_json::to_string_pretty(value)? + "\n";
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn finish(mut self, summary: Value) -> Result<StageOutcome> {
        self.write_json(artifacts::SUMMARY, &summary)?;
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), file_digest(&self.dir.join(name))?);
        }
        let manifest = Manifest {
            stage: self.stage,
            version: 1,
            seed: self.cfg.seed,
            config_sha256: self.cfg.digest(),
            inputs: std::mem::take(&mut self.inputs),
            outputs,
        };
        let p = self.dir.join(artifacts::MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(StageOutcome {
            stage: self.stage,
            dir: self.dir,
            summary,
        })
    }
}

fn read_labeled(ctx: &mut Ctx, path: &Path, split: &str) -> Result<Dataset<LabeledUtterance>> {
    let p = ctx.input(path)?;
    read_dataset(
        &p,
        Format::from_path(&p),
        &ReadOptions {
            repair: false,
            split_name: Some(split.to_string()),
        },
    )
}

fn pretrain(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let path = ctx.input(&cfg.paths.corpus)?;
    let corpus = read_unlabeled(&path, Format::from_path(&path), &ReadOptions::default())?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut lda_cfg = cfg.lda.clone();
    lda_cfg.seed = stream_seed(cfg, "pretrain/lda");
    let lda = fit_lda(&corpus.items, &lda_cfg)?;
    lda.save(ctx.output(artifacts::LDA))?;

    let vocab = Vocabulary::build(corpus.iter().map(|u| u.tokens.as_slice()), cfg.pretrain.min_freq)?;
    let mut summary = json!({
        "corpus_size": corpus.len(),
        "vocab_size": vocab.len(),
        "lda_topics": lda.num_topics,
    });
    for (mode, file) in [(MaskMode::Word, artifacts::RWM), (MaskMode::Context, artifacts::RCM)] {
        let examples: Vec<MlmExample> = corpus
            .iter()
            .map(|u| match mode {
                MaskMode::Word => MlmExample::without_keywords(u.tokens.clone()),
                MaskMode::Context => MlmExample {
                    tokens: u.tokens.clone(),
                    keywords: keyword_mask(&lda, u, cfg.pretrain.keep_fraction).is_keyword,
                },
            })
            .collect();
        let mut model = MlmModel::new(
            cfg.pretrain.model,
            vocab.clone(),
            stream_seed(cfg, &format!("pretrain/{mode}/init")),
        )?;
        let train_cfg = MlmTrainConfig {
            seed: stream_seed(cfg, &format!("pretrain/{mode}/train")),
            ..cfg.pretrain.train
        };
        let report = train_mlm(&mut model, &examples, mode, &train_cfg)?;
        log::info!(
            "pretrain {mode}: loss {:.4} -> {:.4}",
            report.initial_loss,
            report.final_loss
        );
        model.save(ctx.output(file))?;
        summary[mode.as_str()] = serde_json::to_value(&report)?;
    }
    Ok(summary)
}

fn augment(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let train = read_labeled(ctx, &cfg.paths.train, "train")?;
    let lda = TopicModel::load(ctx.upstream(Stage::Pretrain, artifacts::LDA)?)?;
    let rwm = MlmModel::load(ctx.upstream(Stage::Pretrain, artifacts::RWM)?)?;
    let rcm = MlmModel::load(ctx.upstream(Stage::Pretrain, artifacts::RCM)?)?;
    let mut aug_cfg = cfg.augment;
    aug_cfg.seed = stream_seed(cfg, "augment");
    aug_cfg.keep_fraction = cfg.pretrain.keep_fraction;
    let (data, stats) = augment_dataset(&train, &rwm, &rcm, &lda, &aug_cfg)?;
    write_augmented(&data, ctx.output(artifacts::AUGMENTED))?;
    Ok(serde_json::to_value(&stats)?)
}

fn filter_stage(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let train = read_labeled(ctx, &cfg.paths.train, "train")?;
    let augmented = read_augmented(ctx.upstream(Stage::Augment, artifacts::AUGMENTED)?)?;
    let (kept, report) = if cfg.stages.consistency_filter {
        let tcfg = TaggerConfig {
            seed: stream_seed(cfg, "filter/tagger"),
            ..cfg.filter
        };
        filter(&train, &augmented, &tcfg)?
    } else {
        let n = augmented.len();
        let report = FilterReport {
            total: n,
            kept: n,
            ..Default::default()
        };
        (augmented, report)
    };
    write_augmented(&kept, ctx.output(artifacts::KEPT))?;
    ctx.write_json(artifacts::FILTER_REPORT, &report)?;
    Ok(json!({
        "enabled": cfg.stages.consistency_filter,
        "total": report.total,
        "kept": report.kept,
        "dropped": report.dropped,
    }))
}

fn train_stage(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let train = read_labeled(ctx, &cfg.paths.train, "train")?;
    let kept = read_augmented(ctx.upstream(Stage::Filter, artifacts::KEPT)?)?;
    // Both taggers share the seed so that only the data differs.
    let tcfg = TaggerConfig {
        seed: stream_seed(cfg, "train/tagger"),
        ..cfg.tagger
    };
    let (baseline, base_report) = train_tagger(&train.items, &tcfg)?;
    let mut union = train.items.clone();
    for s in kept.iter() {
        union.push(s.to_labeled()?);
    }
    let (method, method_report) = train_tagger(&union, &tcfg)?;
    baseline.save(ctx.output(artifacts::BASELINE_TAGGER))?;
    method.save(ctx.output(artifacts::METHOD_TAGGER))?;
    Ok(json!({
        BASELINE_NAME: { "examples": train.len(), "report": base_report },
        METHOD_NAME: { "examples": union.len(), "report": method_report },
    }))
}

fn perturb_resources(ctx: &mut Ctx, test: &Dataset<LabeledUtterance>, kinds: &[PerturbKind]) -> Result<PerturbResources> {
    let cfg = ctx.cfg;
    let needs = |k: PerturbKind| kinds.contains(&k);
    let mut res = PerturbResources::default();
    if needs(PerturbKind::HomSub) {
        res.homophones = Some(match &cfg.paths.homophones {
            Some(p) => Lexicon::load(ctx.input(p)?)?,
            None => Lexicon::sample_homophones(),
        });
    }
    if needs(PerturbKind::SynSub) {
        res.synonyms = Some(match &cfg.paths.synonyms {
            Some(p) => Lexicon::load(ctx.input(p)?)?,
            None => Lexicon::sample_synonyms(),
        });
    }
    if needs(PerturbKind::AppendIrr) {
        res.distractors = match &cfg.paths.distractors {
            Some(p) => PerturbResources::load_distractors(ctx.input(p)?)?,
            None => fixture::distractor_lines()
                .iter()
                .map(|l| crate::corpus::tokenize_raw(l))
                .collect(),
        };
    }
    if needs(PerturbKind::ConcatSent) {
        res.concat_pool = test.items.clone();
    }
    if needs(PerturbKind::WordInsert) {
        res.mlm = Some(MlmModel::load(ctx.upstream(Stage::Pretrain, artifacts::RWM)?)?);
    }
    Ok(res)
}

fn perturbed_file(name: &str) -> String {
    format!("{name}.jsonl")
}

fn perturb_stage(ctx: &mut Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let test = read_labeled(ctx, &cfg.paths.test, "test")?;
    let kinds: Vec<PerturbKind> = cfg
        .perturb
        .sets
        .iter()
        .flat_map(|s| s.steps.iter().map(|st| st.kind))
        .collect();
    let res = perturb_resources(ctx, &test, &kinds)?;
    let mut summary = serde_json::Map::new();
    for set in &cfg.perturb.sets {
        let specs: Vec<PerturbSpec> = set
            .steps
            .iter()
            .enumerate()
            .map(|(i, st)| {
                PerturbSpec::new(
                    st.kind,
                    st.transform_prob,
                    st.protect_slots,
                    stream_seed(cfg, &format!("perturb/{}/{i}", set.name)),
                )
            })
            .collect();
        let (data, stats) = perturb_dataset(&test, &specs, &res)?;
        write_perturbed(&data, ctx.output(&perturbed_file(&set.name)))?;
        summary.insert(set.name.clone(), serde_json::to_value(&stats)?);
    }
    Ok(Value::Object(summary))
}

/// Span F1 of a tagger on a labeled set.
pub fn evaluate_f1(tagger: &TaggerModel, data: &[LabeledUtterance]) -> Result<f64> {
    let pred = predict_all(tagger, data);
    let gold: Vec<&[String]> = data.iter().map(|u| u.labels.as_slice()).collect();
    Ok(span_f1(&gold, &pred)?.f1)
}

fn evaluate_stage(ctx: &mut Ctx) -> Result<(Value, EvalReport)> {
    let cfg = ctx.cfg;
    let test = read_labeled(ctx, &cfg.paths.test, "test")?;
    let baseline = TaggerModel::load(ctx.upstream(Stage::Train, artifacts::BASELINE_TAGGER)?)?;
    let method = TaggerModel::load(ctx.upstream(Stage::Train, artifacts::METHOD_TAGGER)?)?;
    let mut sets: BTreeMap<String, Dataset<LabeledUtterance>> = BTreeMap::new();
    for set in &cfg.perturb.sets {
        let p = ctx.upstream(Stage::Perturb, &perturbed_file(&set.name))?;
        sets.insert(set.name.clone(), read_dataset(&p, Format::JsonLines, &ReadOptions::default())?);
    }
    for (name, path) in &cfg.paths.perturbed_tests {
        let data = read_labeled(ctx, path, name)?;
        sets.insert(name.clone(), data);
    }
    let run = |name: &str, tagger: &TaggerModel| -> Result<MethodRun> {
        let mut perturbed_f1 = BTreeMap::new();
        for (k, d) in &sets {
            perturbed_f1.insert(k.clone(), evaluate_f1(tagger, &d.items)?);
        }
        Ok(MethodRun {
            name: name.to_string(),
            clean_f1: evaluate_f1(tagger, &test.items)?,
            perturbed_f1,
        })
    };
    let base_run = run(BASELINE_NAME, &baseline)?;
    let method_run = run(METHOD_NAME, &method)?;
    let report = build_report(&method_run, &base_run)?;
    ctx.write_json(artifacts::EVAL_REPORT, &report)?;
    let text_path = ctx.output(artifacts::EVAL_TEXT);
    fs::write(&text_path, report.to_text()).map_err(|e| Error::io(&text_path, e))?;
    let summary = json!({
        "clean_f1": { BASELINE_NAME: base_run.clean_f1, METHOD_NAME: method_run.clean_f1 },
        "perturbed_f1": { BASELINE_NAME: base_run.perturbed_f1, METHOD_NAME: method_run.perturbed_f1 },
        "overall_recovery_rate": report.overall_recovery_rate,
    });
    Ok((summary, report))
}

fn run_inner(stage: Stage, cfg: &PipelineConfig) -> Result<StageOutcome> {
    let mut ctx = Ctx::new(cfg, stage)?;
    let summary = match stage {
        Stage::Pretrain => pretrain(&mut ctx)?,
        Stage::Augment => augment(&mut ctx)?,
        Stage::Filter => filter_stage(&mut ctx)?,
        Stage::Train => train_stage(&mut ctx)?,
        Stage::Perturb => perturb_stage(&mut ctx)?,
        Stage::Evaluate => evaluate_stage(&mut ctx)?.0,
    };
    ctx.finish(summary)
}

/// Runs one stage; errors carry the stage name.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<StageOutcome> {
    cfg.validate().map_err(|e| e.in_stage(stage.as_str()))?;
    log::info!("stage {stage}: start");
    let out = run_inner(stage, cfg).map_err(|e| e.in_stage(stage.as_str()))?;
    log::info!("stage {stage}: done");
    Ok(out)
}

/// Every stage in order, then the evaluation report.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(Vec<StageOutcome>, EvalReport)> {
    let mut outcomes = Vec::new();
    for stage in Stage::ALL {
        outcomes.push(run_stage(stage, cfg)?);
    }
    let report = load_report(cfg)?;
    Ok((outcomes, report))
}

pub fn load_report(cfg: &PipelineConfig) -> Result<EvalReport> {
    let p = stage_dir(cfg, Stage::Evaluate).join(artifacts::EVAL_REPORT);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the bundled synthetic task plus a config pointing at it, returning
/// the config path.
pub fn write_fixture_project(dir: &Path, sizes: fixture::FixtureSizes, seed: u64) -> Result<PathBuf> {
    let data = dir.join("data");
    fixture::write_fixture(&data, sizes, seed)?;
    let mut cfg = PipelineConfig {
        seed,
        ..Default::default()
    };
    cfg.paths.corpus = PathBuf::from("data").join(fixture::files::CORPUS);
    cfg.paths.train = PathBuf::from("data").join(fixture::files::TRAIN);
    cfg.paths.test = PathBuf::from("data").join(fixture::files::TEST);
    cfg.paths.homophones = Some(PathBuf::from("data").join(fixture::files::HOMOPHONES));
    cfg.paths.synonyms = Some(PathBuf::from("data").join(fixture::files::SYNONYMS));
    cfg.paths.distractors = Some(PathBuf::from("data").join(fixture::files::DISTRACTORS));
    cfg.paths.output_dir = PathBuf::from("runs");
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json_pretty() + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(p)
}
