//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p slotaug-core --test acceptance -- 2 5`.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use slotaug::augmentor::{augment_dataset, plan_masks_with, AugmentConfig, AugmentStats, AugmentedSample};
use slotaug::config::PipelineConfig;
use slotaug::consistency::filter_with;
use slotaug::corpus::{Dataset, LabeledUtterance, Token, UnlabeledUtterance};
use slotaug::fixture::{self, FixtureSizes};
use slotaug::metrics::{perturbation_recovery_rate, span_f1, EvalReport};
use slotaug::mlm::{
    masked_recovery_accuracy, train_mlm, MaskMode, MlmConfig, MlmExample, MlmModel, MlmTrainConfig,
    ParamGroup,
};
use slotaug::perturbers::{apply_kind, perturb, Lexicon, PerturbKind, PerturbResources, PerturbSpec};
use slotaug::pipeline::{artifacts, run_pipeline, stage_dir, write_fixture_project, Stage};
use slotaug::rng::{named_rng, rng_from};
use slotaug::tagger::{train_tagger, SequenceLabeler, TaggerArch, TaggerConfig, TaggerModel};
use slotaug::topic_keywords::{fit_lda, fit_lda_observed, keyword_mask, LdaConfig, TopicModel};
use slotaug::vocab::{Vocabulary, BOS, EOS, MASK, NUM_SPECIAL, PAD};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Independent BIO helpers. Deliberately share no code with the library.

type OracleSpan = (usize, usize, String);

fn oracle_valid(labels: &[String]) -> bool {
    let mut open: Option<&str> = None;
    for l in labels {
        if l == "O" {
            open = None;
        } else if let Some(t) = l.strip_prefix("B-") {
            if t.is_empty() {
                return false;
            }
            open = Some(t);
        } else if let Some(t) = l.strip_prefix("I-") {
            if open != Some(t) {
                return false;
            }
        } else {
            return false;
        }
    }
    true
}

/// Every (start, end, type) that is a maximal span in a valid sequence,
/// found by testing all candidate intervals.
fn oracle_spans(labels: &[String]) -> Vec<OracleSpan> {
    let n = labels.len();
    let mut out = Vec::new();
    for i in 0..n {
        let Some(t) = labels[i].strip_prefix("B-") else { continue };
        for j in i..n {
            let inner_ok = (i + 1..=j).all(|k| labels[k] == format!("I-{t}"));
            let closed = j + 1 == n || labels[j + 1] != format!("I-{t}");
            if inner_ok && closed {
                out.push((i, j, t.to_string()));
            }
        }
    }
    out
}

fn span_words(tokens: &[Token], labels: &[String]) -> Vec<(String, Vec<String>)> {
    let mut v: Vec<(String, Vec<String>)> = oracle_spans(labels)
        .into_iter()
        .map(|(i, j, t)| (t, tokens[i..=j].iter().map(|x| x.as_str().to_string()).collect()))
        .collect();
    v.sort();
    v
}

fn is_sub_multiset(small: &[(String, Vec<String>)], big: &[(String, Vec<String>)]) -> bool {
    let mut counts: HashMap<&(String, Vec<String>), i64> = HashMap::new();
    for s in big {
        *counts.entry(s).or_default() += 1;
    }
    for s in small {
        let c = counts.entry(s).or_default();
        *c -= 1;
        if *c < 0 {
            return false;
        }
    }
    true
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

// ---------------------------------------------------------------------------
// Shared state: a small trained stack and cached pipeline runs.

struct Stack {
    train: Dataset<LabeledUtterance>,
    lda: TopicModel,
    rwm: MlmModel,
    augmented: Dataset<AugmentedSample>,
    stats: AugmentStats,
}

struct Ctx {
    root: tempfile::TempDir,
    stack: RefCell<Option<std::rc::Rc<Stack>>>,
    runs: RefCell<BTreeMap<u64, (PathBuf, EvalReport)>>,
}

impl Ctx {
    fn stack(&self) -> std::rc::Rc<Stack> {
        if let Some(s) = self.stack.borrow().as_ref() {
            return s.clone();
        }
        let s = std::rc::Rc::new(build_stack());
        *self.stack.borrow_mut() = Some(s.clone());
        s
    }

    fn pipeline(&self, seed: u64, tag: &str) -> (PathBuf, EvalReport) {
        if tag == "a" {
            if let Some(r) = self.runs.borrow().get(&seed) {
                return r.clone();
            }
        }
        let dir = self.root.path().join(format!("seed{seed}-{tag}"));
        let cfg_path = write_fixture_project(&dir, FixtureSizes::default(), seed).unwrap();
        let cfg = PipelineConfig::load(Some(&cfg_path), &[]).unwrap();
        let (_, report) = run_pipeline(&cfg).unwrap();
        let out = (cfg_path, report);
        if tag == "a" {
            self.runs.borrow_mut().insert(seed, out.clone());
        }
        out
    }
}

fn build_stack() -> Stack {
    let train = fixture::slot_dataset("train", 400, 7);
    let corpus = fixture::perturbation_corpus(1500, 5);
    let lda = fit_lda(
        &corpus.items,
        &LdaConfig {
            num_topics: 8,
            iterations: 60,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let vocab = Vocabulary::build(corpus.iter().map(|u| u.tokens.as_slice()), 1).unwrap();
    let mcfg = MlmConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 4,
        max_len: 48,
        ffn_mult: 2,
    };
    let tcfg = MlmTrainConfig {
        epochs: 2,
        seed: 9,
        ..Default::default()
    };
    let word: Vec<MlmExample> = corpus
        .iter()
        .map(|u| MlmExample::without_keywords(u.tokens.clone()))
        .collect();
    let ctx: Vec<MlmExample> = corpus
        .iter()
        .map(|u| MlmExample {
            tokens: u.tokens.clone(),
            keywords: keyword_mask(&lda, u, 0.3).is_keyword,
        })
        .collect();
    let mut rwm = MlmModel::new(mcfg, vocab.clone(), 1).unwrap();
    train_mlm(&mut rwm, &word, MaskMode::Word, &tcfg).unwrap();
    let mut rcm = MlmModel::new(mcfg, vocab, 2).unwrap();
    train_mlm(&mut rcm, &ctx, MaskMode::Context, &tcfg).unwrap();
    let acfg = AugmentConfig {
        copies_per_mode: 2,
        seed: 21,
        ..Default::default()
    };
    let (augmented, stats) = augment_dataset(&train, &rwm, &rcm, &lda, &acfg).unwrap();
    Stack {
        train,
        lda,
        rwm,
        augmented,
        stats,
    }
}

// ---------------------------------------------------------------------------
// 1. Recovery-rate tables.

struct Row {
    name: &'static str,
    f1: [f64; 4],
    printed: [f64; 4],
    overall: f64,
}

const fn row(name: &'static str, f1: [f64; 4], printed: [f64; 4], overall: f64) -> Row {
    Row {
        name,
        f1,
        printed,
        overall,
    }
}

const COLUMNS: [&str; 4] = ["homophone", "paraphrase", "verbose", "simplification"];

const LSTM_CLEAN: f64 = 95.8;
const LSTM_BASE: [f64; 4] = [81.5, 87.5, 81.6, 85.3];
const LSTM_ROWS: &[Row] = &[
    row("char_random", [84.1, 87.6, 83.2, 88.1], [18.2, 1.2, 11.3, 26.7], 14.4),
    row("word_del", [83.2, 89.3, 82.6, 87.5], [11.9, 21.7, 7.0, 21.0], 15.4),
    row("syn_sub", [83.5, 89.3, 82.2, 86.8], [14.0, 21.7, 4.2, 14.3], 13.6),
    row("word_insert", [81.2, 88.2, 81.3, 86.2], [-2.1, 8.4, -2.1, 8.6], 3.2),
    row("hom_sub", [83.7, 89.3, 82.3, 87.7], [15.4, 21.7, 4.9, 22.9], 16.3),
    row("nat_aug", [84.3, 87.7, 82.8, 87.3], [19.6, 2.4, 8.5, 19.0], 12.4),
    row("nat_stabil", [83.9, 87.4, 83.0, 87.3], [16.8, -1.2, 9.9, 19.0], 11.1),
    row("full", [84.6, 90.1, 84.0, 89.3], [21.7, 31.3, 16.9, 38.1], 27.0),
    row("no_rcm", [83.8, 89.6, 83.5, 87.4], [16.1, 25.3, 13.4, 20.0], 18.7),
    row("no_rwm", [83.3, 89.9, 83.8, 88.9], [12.6, 28.9, 15.5, 34.3], 22.8),
    row("no_cp", [84.0, 90.0, 83.4, 88.3], [17.5, 30.1, 12.7, 28.6], 22.2),
    row("no_pretrain", [83.1, 89.4, 83.0, 86.9], [11.2, 22.9, 9.9, 15.2], 14.8),
];

const BERT_CLEAN: f64 = 96.2;
const BERT_BASE: [f64; 4] = [82.8, 90.4, 84.4, 87.7];
const BERT_ROWS: &[Row] = &[
    row("char_random", [85.0, 89.9, 84.9, 88.1], [16.4, -8.6, 4.2, 4.7], 4.2),
    row("word_del", [84.5, 90.0, 84.5, 88.0], [12.7, -6.9, 0.8, 3.5], 2.5),
    row("word_sub", [84.1, 90.2, 84.1, 88.2], [9.7, -3.4, -2.5, 5.9], 2.4),
    row("word_insert", [84.3, 90.5, 83.9, 88.5], [9.7, 1.7, -4.2, 9.4], 4.2),
    row("homophone", [85.8, 90.2, 82.4, 87.5], [22.4, -3.4, -16.9, -2.4], -0.1),
    row("nat_aug", [85.2, 90.5, 85.4, 88.0], [17.7, 2.4, 8.3, 3.0], 7.9),
    row("nat_stabil", [85.1, 90.3, 85.2, 88.0], [16.8, -1.2, 6.6, 3.0], 6.3),
    row("full", [85.6, 91.5, 85.8, 89.7], [20.9, 19.0, 11.9, 23.5], 18.8),
    row("no_rcm", [84.7, 91.3, 85.1, 88.4], [14.0, 15.5, 5.9, 8.2], 10.9),
    row("no_rwm", [83.5, 91.5, 85.7, 89.4], [5.2, 19.0, 11.0, 20.0], 13.8),
    row("no_pretrain", [83.1, 90.7, 84.9, 88.2], [2.2, 4.9, 4.4, 5.6], 4.3),
];

/// Returns (cells checked, mismatches).
fn check_table(clean: f64, base: [f64; 4], rows: &[Row]) -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for r in rows {
        let mut rates = [0.0; 4];
        for c in 0..4 {
            rates[c] = 100.0 * perturbation_recovery_rate(r.f1[c], base[c], clean).unwrap();
            checked += 1;
            if (rates[c] - r.printed[c]).abs() > 0.1 + 1e-9 {
                bad.push(format!("{}/{} {:.2} vs {}", r.name, COLUMNS[c], rates[c], r.printed[c]));
            }
        }
        let overall = rates.iter().sum::<f64>() / 4.0;
        checked += 1;
        if (overall - r.overall).abs() > 0.1 + 1e-9 {
            bad.push(format!("{}/overall {:.2} vs {}", r.name, overall, r.overall));
        }
    }
    (checked, bad)
}

fn criterion_1(_: &Ctx) -> Outcome {
    let (n1, bad1) = check_table(LSTM_CLEAN, LSTM_BASE, LSTM_ROWS);
    let (n5, bad5) = check_table(BERT_CLEAN, BERT_BASE, BERT_ROWS);
    let mut detail = format!(
        "lstm table {}/{} cells within 0.1pp; bert table {}/{}",
        n1 - bad1.len(),
        n1,
        n5 - bad5.len(),
        n5
    );
    for b in bad1.iter().chain(&bad5) {
        detail.push_str(&format!("; {b}"));
    }
    outcome(bad1.is_empty() && bad5.is_empty(), detail)
}

// ---------------------------------------------------------------------------
// 2. Span F1 against brute force.

const TYPES: [&str; 4] = ["city", "day", "time", "food"];

fn random_labels(rng: &mut slotaug::rng::Rng, n: usize, types: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    for _ in 0..n {
        let prev_type = out.last().and_then(|l| l.get(2..)).map(str::to_string);
        let r = rng.random_range(0..10);
        let l = if r < 4 {
            "O".to_string()
        } else if r < 7 && prev_type.is_some() {
            format!("I-{}", prev_type.unwrap())
        } else {
            format!("B-{}", TYPES[rng.random_range(0..types)])
        };
        out.push(l);
    }
    out
}

fn near_copy(rng: &mut slotaug::rng::Rng, gold: &[String], types: usize) -> Vec<String> {
    let mut p = gold.to_vec();
    for l in p.iter_mut() {
        if rng.random::<f64>() < 0.25 {
            *l = match rng.random_range(0..3) {
                0 => "O".to_string(),
                1 => format!("B-{}", TYPES[rng.random_range(0..types)]),
                _ => format!("I-{}", TYPES[rng.random_range(0..types)]),
            };
        }
    }
    // Turn dangling I- tags into B- so the result stays well formed.
    for i in 0..p.len() {
        if let Some(t) = p[i].strip_prefix("I-").map(str::to_string) {
            let ok = i > 0 && p[i - 1].get(2..) == Some(t.as_str()) && p[i - 1] != "O";
            if !ok {
                p[i] = format!("B-{t}");
            }
        }
    }
    p
}

fn criterion_2(_: &Ctx) -> Outcome {
    let mut rng = rng_from(2024);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..1000 {
        let types = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..m {
            let n = rng.random_range(1..=12);
            let g = random_labels(&mut rng, n, types);
            let p = if rng.random::<bool>() {
                near_copy(&mut rng, &g, types)
            } else {
                random_labels(&mut rng, n, types)
            };
            assert!(oracle_valid(&g) && oracle_valid(&p));
            gold.push(g);
            pred.push(p);
        }
        let (mut hit, mut np, mut ng) = (0usize, 0usize, 0usize);
        for (g, p) in gold.iter().zip(&pred) {
            let gs = oracle_spans(g);
            let ps = oracle_spans(p);
            hit += ps.iter().filter(|s| gs.contains(s)).count();
            np += ps.len();
            ng += gs.len();
        }
        let prec = if np == 0 { if ng == 0 { 1.0 } else { 0.0 } } else { hit as f64 / np as f64 };
        let rec = if ng == 0 { if np == 0 { 1.0 } else { 0.0 } } else { hit as f64 / ng as f64 };
        let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        let got = span_f1(&gold, &pred).unwrap();
        let err = (got.f1 - f1)
            .abs()
            .max((got.precision - prec).abs())
            .max((got.recall - rec).abs());
        worst = worst.max(err);
        if err > 1e-12 {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("1000 instances, {failures} disagreements, max abs diff {worst:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Finite-difference gradient checks.

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Checks `k` sampled indices; returns (sampled, worst error).
fn grad_check(
    params: &[f64],
    analytic: &[f64],
    pool: &[usize],
    k: usize,
    rng: &mut slotaug::rng::Rng,
    loss: impl Fn(&[f64]) -> f64,
) -> (usize, f64) {
    let mut pool = pool.to_vec();
    pool.shuffle(rng);
    pool.truncate(k);
    let mut theta = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in &pool {
        let orig = theta[i];
        theta[i] = orig + EPS;
        let up = loss(&theta);
        theta[i] = orig - EPS;
        let down = loss(&theta);
        theta[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * EPS)));
    }
    (pool.len(), worst)
}

fn criterion_3(_: &Ctx) -> Outcome {
    let mut rng = rng_from(33);
    let mut lines = Vec::new();
    let mut ok = true;

    let corpus = fixture::perturbation_corpus(300, 4);
    let vocab = Vocabulary::build(corpus.iter().map(|u| u.tokens.as_slice()), 1).unwrap();
    let cfg = MlmConfig {
        d_model: 12,
        n_layers: 2,
        n_heads: 2,
        max_len: 16,
        ffn_mult: 2,
    };
    let mut model = MlmModel::new(cfg, vocab, 8).unwrap();
    // Move every parameter off its initial value so that gains, biases and
    // LayerNorm offsets are all exercised away from 0 and 1.
    for p in model.params.iter_mut() {
        *p += 0.05 * (rng.random::<f64>() - 0.5);
    }
    let vsz = model.vocab_size();
    let mut ids: Vec<usize> = vec![BOS];
    ids.extend((0..14).map(|_| rng.random_range(NUM_SPECIAL..vsz)));
    ids.push(EOS);
    let mut targets = Vec::new();
    for pos in [2, 5, 9, 13] {
        targets.push((pos, ids[pos]));
        ids[pos] = MASK;
    }
    let mut grad = vec![0.0; model.params.len()];
    model.loss_and_grad(&ids, &targets, 1.0, &mut grad).unwrap();
    let layout = model.layout().clone();
    for group in ParamGroup::ALL {
        let pool: Vec<usize> = layout.group(group).into_iter().flatten().collect();
        let probe = model.clone();
        let (n, worst) = grad_check(&model.params, &grad, &pool, 100, &mut rng, |theta| {
            let mut m = probe.clone();
            m.params.copy_from_slice(theta);
            m.loss(&ids, &targets).unwrap()
        });
        ok &= n >= 100 && worst <= TOL;
        lines.push(format!("mlm {group:?} n={n} max_rel={worst:.1e}"));
    }

    let data = fixture::slot_dataset("grad", 6, 3);
    let tvocab = Vocabulary::build(data.iter().map(|u| u.tokens.as_slice()), 1).unwrap();
    let mut tags: Vec<String> = data.iter().flat_map(|u| u.labels.iter().cloned()).collect();
    tags.sort();
    tags.dedup();
    tags.retain(|t| t != "O");
    tags.insert(0, "O".to_string());
    let arch = TaggerArch {
        window: 2,
        emb_dim: 8,
        hidden: 16,
    };
    let tagger = TaggerModel::new(arch, tvocab, tags, 5).unwrap();
    let gold: Vec<Vec<usize>> = data.iter().map(|u| tagger.encode_tags(&u.labels).0).collect();
    let mut tgrad = vec![0.0; tagger.params.len()];
    for (u, g) in data.iter().zip(&gold) {
        tagger.loss_and_grad(&u.tokens, g, 1.0, &mut tgrad, None);
    }
    let tl = tagger.layout().clone();
    let mut used: Vec<usize> = data.iter().flat_map(|u| tagger.vocab.encode(&u.tokens)).collect();
    used.push(PAD);
    used.sort_unstable();
    used.dedup();
    let emb_pool: Vec<usize> = used
        .iter()
        .flat_map(|&id| tl.emb.start + id * arch.emb_dim..tl.emb.start + (id + 1) * arch.emb_dim)
        .collect();
    let groups = [
        ("embedding", emb_pool),
        ("hidden", tl.w1.clone().chain(tl.b1.clone()).collect()),
        ("output", tl.w2.clone().chain(tl.b2.clone()).collect()),
    ];
    for (name, pool) in groups {
        let (n, worst) = grad_check(&tagger.params, &tgrad, &pool, 100, &mut rng, |theta| {
            let mut m = tagger.clone();
            m.params.copy_from_slice(theta);
            data.iter().zip(&gold).map(|(u, g)| m.loss(&u.tokens, g)).sum()
        });
        ok &= n >= 100 && worst <= TOL;
        lines.push(format!("tagger {name} n={n} max_rel={worst:.1e}"));
    }
    outcome(ok, lines.join(", "))
}

// ---------------------------------------------------------------------------
// 4. MLM learnability on the template grammar.

fn criterion_4(_: &Ctx) -> Outcome {
    let start = Instant::now();
    let train = fixture::grammar_corpus(2000, 1);
    let held_out = fixture::grammar_corpus(500, 2);
    let vocab = Vocabulary::build(train.iter().map(|s| s.as_slice()), 1).unwrap();
    let mut model = MlmModel::new(MlmConfig::default(), vocab, 4).unwrap();
    let examples: Vec<MlmExample> = train.into_iter().map(MlmExample::without_keywords).collect();
    let cfg = MlmTrainConfig {
        seed: 4,
        ..Default::default()
    };
    let report = train_mlm(&mut model, &examples, MaskMode::Word, &cfg).unwrap();
    let acc = masked_recovery_accuracy(&model, &held_out, 0.15, 99).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        acc >= 0.9 && secs < 300.0,
        format!(
            "held-out top-1 recovery {:.3}, loss {:.3} -> {:.3}, training {secs:.0}s",
            acc, report.initial_loss, report.final_loss
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. LDA on two disjoint vocabularies.

fn criterion_5(_: &Ctx) -> Outcome {
    let mut rng = rng_from(55);
    let mut docs = Vec::new();
    for (g, prefix) in ["a", "b"].iter().enumerate() {
        for d in 0..50 {
            let toks: Vec<Token> = (0..20)
                .map(|_| Token::new(format!("{prefix}{}", rng.random_range(1..=10))).unwrap())
                .collect();
            docs.push(UnlabeledUtterance::new(format!("{g}-{d}"), toks).unwrap());
        }
    }
    let cfg = LdaConfig {
        num_topics: 2,
        iterations: 200,
        seed: 5,
        ..Default::default()
    };
    let mut sweeps = 0;
    let mut violations = 0;
    let model = fit_lda_observed(&docs, &cfg, |_, m| {
        sweeps += 1;
        if m.check_invariants().is_err() {
            violations += 1;
        }
    })
    .unwrap();
    // counts[group][topic] over every token assignment.
    let mut counts = [[0usize; 2]; 2];
    for (d, z) in model.assignments.iter().enumerate() {
        for &t in z {
            counts[d / 50][t as usize] += 1;
        }
    }
    let purity = |g: usize| *counts[g].iter().max().unwrap() as f64 / counts[g].iter().sum::<usize>() as f64;
    let major = |g: usize| if counts[g][0] >= counts[g][1] { 0 } else { 1 };
    let (pa, pb) = (purity(0), purity(1));
    let distinct = major(0) != major(1);
    outcome(
        pa >= 0.9 && pb >= 0.9 && distinct && violations == 0 && sweeps == 200,
        format!(
            "purity a={pa:.3} b={pb:.3}, distinct topics {distinct}, {violations} invariant violations over {sweeps} sweeps"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Coarse-label invariants.

fn audit(src: &LabeledUtterance, s: &AugmentedSample) -> Vec<String> {
    let mut v = Vec::new();
    let n = s.tokens.len();
    if s.coarse_labels.len() != n || s.infilled.len() != n || s.alignment.len() != src.tokens.len() {
        return vec!["shape".into()];
    }
    if !oracle_valid(&s.coarse_labels) {
        v.push("bio".into());
    }
    let mut preimage = vec![0usize; n];
    for (i, a) in s.alignment.iter().enumerate() {
        match a {
            Some(j) if *j < n => {
                preimage[*j] += 1;
                if s.tokens[*j] != src.tokens[i] || s.coarse_labels[*j] != src.labels[i] {
                    v.push(format!("source {i} not preserved"));
                }
                if s.infilled[*j] {
                    v.push(format!("aligned {j} marked infilled"));
                }
            }
            Some(j) => v.push(format!("alignment {j} out of range")),
            None => {
                if src.labels[i] != "O" {
                    v.push(format!("slot token {i} masked"));
                }
            }
        }
    }
    for (j, &count) in preimage.iter().enumerate() {
        if s.infilled[j] && s.coarse_labels[j] != "O" {
            v.push(format!("infilled {j} not O"));
        }
        if !s.infilled[j] && count != 1 {
            v.push(format!("position {j} has {count} preimages"));
        }
    }
    if span_words(&src.tokens, &src.labels) != span_words(&s.tokens, &s.coarse_labels) {
        v.push("slot spans changed".into());
    }
    v
}

fn criterion_6(ctx: &Ctx) -> Outcome {
    let st = ctx.stack();
    let by_id: HashMap<&str, &LabeledUtterance> = st.train.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut bad = 0;
    let mut first = None;
    for s in st.augmented.iter() {
        let v = audit(by_id[s.source_id.as_str()], s);
        if !v.is_empty() {
            bad += 1;
            first.get_or_insert_with(|| format!("{}: {}", s.id, v.join(", ")));
        }
    }
    let n = st.augmented.len();
    let infilled: usize = st.augmented.iter().map(|s| s.infilled.iter().filter(|b| **b).count()).sum();
    let mut detail = format!(
        "{n} samples ({} word, {} context), {infilled} infilled tokens, {bad} with violations",
        st.stats.per_mode.get("word").copied().unwrap_or(0),
        st.stats.per_mode.get("context").copied().unwrap_or(0),
    );
    if let Some(f) = first {
        detail.push_str(&format!("; first: {f}"));
    }
    outcome(n >= 1000 && bad == 0, detail)
}

// ---------------------------------------------------------------------------
// 7. Consistency filter contracts.

struct Oracle(HashMap<Vec<Token>, Vec<String>>);

impl SequenceLabeler for Oracle {
    fn predict(&self, tokens: &[Token]) -> Vec<String> {
        self.0
            .get(tokens)
            .cloned()
            .unwrap_or_else(|| vec!["O".to_string(); tokens.len()])
    }
}

struct AllOutside;

impl SequenceLabeler for AllOutside {
    fn predict(&self, tokens: &[Token]) -> Vec<String> {
        vec!["O".to_string(); tokens.len()]
    }
}

/// The keep rule, restated: the tagger agrees on every coarse slot position
/// and the coarse spans are the source spans carried through the alignment.
fn oracle_keep(src: &LabeledUtterance, s: &AugmentedSample, pred: &[String]) -> bool {
    if pred.len() != s.tokens.len() {
        return false;
    }
    for (j, c) in s.coarse_labels.iter().enumerate() {
        if c != "O" && pred[j] != *c {
            return false;
        }
    }
    let mut mapped = Vec::new();
    for (i, k, t) in oracle_spans(&src.labels) {
        let idx: Option<Vec<usize>> = (i..=k).map(|p| s.alignment[p]).collect();
        let Some(idx) = idx else { return false };
        if idx.windows(2).any(|w| w[1] != w[0] + 1) {
            return false;
        }
        if (i..=k).zip(&idx).any(|(p, &q)| src.tokens[p] != s.tokens[q]) {
            return false;
        }
        mapped.push((idx[0], idx[idx.len() - 1], t));
    }
    let mut coarse = oracle_spans(&s.coarse_labels);
    mapped.sort();
    coarse.sort();
    mapped == coarse
}

fn relabel_first_span(s: &mut AugmentedSample) -> bool {
    let Some((i, k, t)) = oracle_spans(&s.coarse_labels).into_iter().next() else {
        return false;
    };
    let other = TYPES.iter().chain(["area", "people"].iter()).find(|x| **x != t).unwrap();
    s.coarse_labels[i] = format!("B-{other}");
    for j in i + 1..=k {
        s.coarse_labels[j] = format!("I-{other}");
    }
    true
}

fn criterion_7(ctx: &Ctx) -> Outcome {
    let st = ctx.stack();
    let by_id: HashMap<&str, &LabeledUtterance> = st.train.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut lines = Vec::new();
    let mut ok = true;

    let oracle = Oracle(
        st.augmented
            .iter()
            .map(|s| (s.tokens.clone(), s.coarse_labels.clone()))
            .collect(),
    );
    let (_, rep) = filter_with(&oracle, &st.train, &st.augmented).unwrap();
    ok &= rep.kept == rep.total && rep.total > 0;
    lines.push(format!("oracle keeps {}/{}", rep.kept, rep.total));

    // The fixture always has slots, so add a slot-free source with one sample.
    let free = LabeledUtterance::parse("free-0", "i need a ride now", "O O O O O").unwrap();
    let mut originals = st.train.items.clone();
    originals.push(free.clone());
    let mut samples = st.augmented.items.clone();
    samples.push(AugmentedSample {
        id: "free-0#word-0".into(),
        source_id: free.id.clone(),
        mode: MaskMode::Word,
        tokens: slotaug::corpus::tokens(&["i", "need", "a", "car", "now"]).unwrap(),
        coarse_labels: vec!["O".to_string(); 5],
        alignment: vec![Some(0), Some(1), Some(2), None, Some(4)],
        infilled: vec![false, false, false, true, false],
    });
    let originals = Dataset::new("train", originals).unwrap();
    let samples = Dataset::new("augmented", samples).unwrap();
    let (kept, _) = filter_with(&AllOutside, &originals, &samples).unwrap();
    let slot_total = samples.iter().filter(|s| s.coarse_labels.iter().any(|l| l != "O")).count();
    let slot_kept = kept.iter().filter(|s| s.coarse_labels.iter().any(|l| l != "O")).count();
    let free_total = samples.len() - slot_total;
    let free_kept = kept.len() - slot_kept;
    ok &= slot_kept == 0 && slot_total > 0 && free_kept == free_total;
    lines.push(format!(
        "all-O keeps {slot_kept}/{slot_total} slot-bearing, {free_kept}/{free_total} slot-free"
    ));

    // A trained tagger on a set where one sample in ten has a relabeled span.
    let mut items = st.augmented.items.clone();
    let mut corrupted = std::collections::HashSet::new();
    for (i, s) in items.iter_mut().enumerate() {
        if i % 10 == 0 && relabel_first_span(s) {
            corrupted.insert(s.id.clone());
        }
    }
    let mixed = Dataset::new("mixed", items).unwrap();
    let mut union = st.train.items.clone();
    union.extend(st.augmented.iter().map(|s| s.to_labeled().unwrap()));
    let (tagger, _) = train_tagger(
        &union,
        &TaggerConfig {
            epochs: 6,
            seed: 7,
            ..Default::default()
        },
    )
    .unwrap();
    let (kept, rep) = filter_with(&tagger, &st.train, &mixed).unwrap();
    let reverified = kept
        .iter()
        .filter(|s| oracle_keep(by_id[s.source_id.as_str()], s, &tagger.predict(&s.tokens)))
        .count();
    let leaked = kept.iter().filter(|s| corrupted.contains(&s.id)).count();
    // Every sample the rule rejects must also be rejected by the restatement.
    let kept_ids: std::collections::HashSet<&str> = kept.iter().map(|s| s.id.as_str()).collect();
    let disagreements = mixed
        .iter()
        .filter(|s| {
            let mine = oracle_keep(by_id[s.source_id.as_str()], s, &tagger.predict(&s.tokens));
            mine != kept_ids.contains(s.id.as_str())
        })
        .count();
    let rate = rep.keep_rate();
    ok &= reverified == kept.len() && leaked == 0 && disagreements == 0 && rate > 0.0 && rate < 1.0;
    lines.push(format!(
        "trained tagger keep rate {rate:.3} on {} ({} corrupted, {leaked} leaked), {reverified}/{} kept re-verified, {disagreements} rule disagreements",
        mixed.len(),
        corrupted.len(),
        kept.len()
    ));
    outcome(ok, lines.join("; "))
}

// ---------------------------------------------------------------------------
// 8. Perturber contracts.

fn resources(st: &Stack) -> PerturbResources {
    PerturbResources {
        homophones: Some(Lexicon::sample_homophones()),
        synonyms: Some(Lexicon::sample_synonyms()),
        distractors: fixture::distractor_lines()
            .iter()
            .map(|l| slotaug::corpus::tokenize_raw(l))
            .collect(),
        concat_pool: fixture::slot_dataset("pool", 50, 12).items,
        mlm: Some(st.rwm.clone()),
    }
}

fn criterion_8(ctx: &Ctx) -> Outcome {
    let st = ctx.stack();
    let res = resources(&st);
    let data = fixture::slot_dataset("test", 200, 11);
    let mut ok = true;
    let mut lines = Vec::new();

    for kind in PerturbKind::ALL {
        let mut mutated = 0;
        let mut invalid = 0;
        let mut changed = 0;
        for seed in 0..1000u64 {
            let u = &data.items[seed as usize % data.len()];
            let spec = PerturbSpec::new(kind, 0.3, true, seed);
            let Some(out) = perturb(u, &spec, &res).unwrap() else { continue };
            changed += 1;
            if !oracle_valid(&out.labels) || out.labels.len() != out.tokens.len() {
                invalid += 1;
            }
            let before = span_words(&u.tokens, &u.labels);
            let after = span_words(&out.tokens, &out.labels);
            let intact = if kind == PerturbKind::ConcatSent {
                is_sub_multiset(&before, &after)
            } else {
                before == after
            };
            if !intact {
                mutated += 1;
            }
        }
        ok &= mutated == 0 && invalid == 0;
        lines.push(format!("{kind}: {changed} changed, {mutated} span mutations, {invalid} invalid"));
    }

    // Per-position action rate of the token-level kinds, one draw each.
    for kind in PerturbKind::ALL.into_iter().filter(|k| !k.is_structural()) {
        let (mut eligible, mut acted) = (0usize, 0usize);
        let mut i = 0u64;
        while eligible < 10_000 {
            let u = &data.items[i as usize % data.len()];
            let spec = PerturbSpec::new(kind, 0.3, true, 8);
            let mut rng = named_rng(8, &format!("rate/{kind}/{i}"));
            let (_, _, c) = apply_kind(&u.tokens, &u.labels, &u.id, &spec, &res, &mut rng).unwrap();
            eligible += c.eligible;
            acted += c.acted;
            i += 1;
        }
        let rate = acted as f64 / eligible as f64;
        ok &= (rate - 0.3).abs() <= 0.02;
        lines.push(format!("{kind} rate {rate:.4} over {eligible}"));
    }

    // Mask planner rate over non-keyword outside positions.
    for mode in [MaskMode::Word, MaskMode::Context] {
        let (mut cand, mut masked) = (0usize, 0usize);
        let mut i = 0u64;
        while cand < 10_000 {
            let u = &data.items[i as usize % data.len()];
            let kw = keyword_mask(&st.lda, u, 0.3).is_keyword;
            let plan = plan_masks_with(u, mode, &kw, 0.3, 1000 + i);
            cand += u
                .labels
                .iter()
                .zip(&kw)
                .filter(|(l, k)| *l == "O" && (mode == MaskMode::Word || !**k))
                .count();
            masked += plan.positions.len();
            i += 1;
        }
        let rate = masked as f64 / cand as f64;
        ok &= (rate - 0.3).abs() <= 0.02;
        lines.push(format!("{mode} mask rate {rate:.4} over {cand}"));
    }
    outcome(ok, lines.join(", "))
}

// ---------------------------------------------------------------------------
// 9 and 10. End-to-end runs on the bundled fixture.

fn criterion_9(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut method_p = Vec::new();
    let mut base_p = Vec::new();
    let mut method_c = Vec::new();
    let mut base_c = Vec::new();
    let mut per_seed = Vec::new();
    for seed in [1, 2, 3] {
        let (_, r) = ctx.pipeline(seed, "a");
        let row = r.rows.iter().find(|x| x.perturbation == "mixed").expect("mixed row");
        per_seed.push(format!(
            "seed {seed}: perturbed {:.4}/{:.4} clean {:.4}/{:.4}",
            row.f1, row.baseline_f1, r.clean_f1, r.baseline_clean_f1
        ));
        method_p.push(row.f1);
        base_p.push(row.baseline_f1);
        method_c.push(r.clean_f1);
        base_c.push(r.baseline_clean_f1);
    }
    let (mp, bp) = (median(method_p), median(base_p));
    let drop = median(base_c) - median(method_c);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mp >= bp && drop < 0.01 && secs < 900.0,
        format!(
            "median perturbed F1 {mp:.4} vs baseline {bp:.4}, median clean drop {drop:.4} (method/baseline: {})",
            per_seed.join("; ")
        ),
    )
}

fn criterion_10(ctx: &Ctx) -> Outcome {
    let (cfg_a, rep_a) = ctx.pipeline(1, "a");
    let (cfg_b, rep_b) = ctx.pipeline(1, "b");
    let a = PipelineConfig::load(Some(&cfg_a), &[]).unwrap();
    let b = PipelineConfig::load(Some(&cfg_b), &[]).unwrap();
    let files = [
        (Stage::Augment, artifacts::AUGMENTED.to_string()),
        (Stage::Filter, artifacts::KEPT.to_string()),
        (Stage::Perturb, "mixed.jsonl".to_string()),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (stage, name) in files {
        let x = std::fs::read(stage_dir(&a, stage).join(&name)).unwrap();
        let y = std::fs::read(stage_dir(&b, stage).join(&name)).unwrap();
        ok &= x == y && !x.is_empty();
        lines.push(format!("{stage}/{name} identical {} ({} bytes)", x == y, x.len()));
    }
    let same_report = rep_a == rep_b;
    ok &= same_report;
    lines.push(format!("reports identical {same_report}"));
    outcome(ok, lines.join(", "))
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, fn(&Ctx) -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "recovery-rate tables", criterion_1),
    (2, "span F1 vs brute force", criterion_2),
    (3, "gradient checks", criterion_3),
    (4, "MLM learnability", criterion_4),
    (5, "LDA sanity", criterion_5),
    (6, "coarse-label invariants", criterion_6),
    (7, "consistency filter contracts", criterion_7),
    (8, "perturber contracts", criterion_8),
    (9, "end-to-end direction", criterion_9),
    (10, "determinism", criterion_10),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx {
        root: tempfile::tempdir().unwrap(),
        stack: RefCell::new(None),
        runs: RefCell::new(BTreeMap::new()),
    };
    let mut failed = 0;
    for &(n, title, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(|| f(&ctx))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!out.pass);
        println!(
            "criterion {n} [PRIMARY] {title}: {verdict} ({}; {:.1}s)",
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
