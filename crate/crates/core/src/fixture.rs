//! Bundled synthetic data: a template-grammar corpus for MLM sanity checks,
//! a small travel/restaurant slot-filling task, a noisy unlabeled corpus in
//! the same domain, lexicons and a distractor pool.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::corpus::{
    tokens, write_dataset, write_unlabeled, Dataset, Format, LabeledUtterance, Token,
    UnlabeledUtterance,
};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const GRAMMAR_DETS: &[&str] = &["the", "a", "every", "some"];
const GRAMMAR_SUBJECTS: &[&str] = &[
    "cat", "dog", "bird", "horse", "farmer", "pilot", "doctor", "child", "teacher", "baker",
    "sailor", "king", "queen", "fox", "owl", "wolf", "tiger", "chef", "miner", "judge", "nurse",
    "poet", "monk", "clown",
];
const GRAMMAR_VERBS: &[&str] = &[
    "chases", "feeds", "watches", "rides", "plants", "flies", "heals", "draws", "teaches",
    "bakes", "sails", "rules", "crowns", "hunts", "hears", "guards", "stalks", "cooks", "digs",
    "sentences", "tends", "writes", "prays", "juggles",
];
const GRAMMAR_OBJECTS: &[&str] = &[
    "mice", "ducks", "worms", "carts", "seeds", "planes", "wounds", "maps", "pupils", "bread",
    "boats", "lands", "heirs", "hares", "songs", "sheep", "deer", "soup", "coal", "thieves",
    "patients", "verses", "psalms", "balls",
];

/// `<det> <noun> <verb> <noun>`: the subject fixes every other word, so any
/// single masked token is recoverable from its context.
pub fn grammar_corpus(n: usize, seed: u64) -> Vec<Vec<Token>> {
    let mut rng = rng::named_rng(seed, "grammar-corpus");
    (0..n)
        .map(|_| {
            let s = rng.random_range(0..GRAMMAR_SUBJECTS.len());
            tokens(&[
                GRAMMAR_DETS[s % GRAMMAR_DETS.len()],
                GRAMMAR_SUBJECTS[s],
                GRAMMAR_VERBS[s],
                GRAMMAR_OBJECTS[s],
            ])
            .expect("static words are valid tokens")
        })
        .collect()
}

pub fn grammar_determiners() -> &'static [&'static str] {
    GRAMMAR_DETS
}

const CITIES: &[&str] = &[
    "boston", "denver", "paris", "london", "chicago", "dallas", "seattle", "miami", "new york",
    "san francisco", "los angeles", "kings lynn", "austin", "atlanta", "phoenix", "toronto",
];
const DAYS: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "tomorrow",
];
const TIMES: &[&str] = &[
    "noon", "midnight", "13:15", "9am", "10 pm", "7 pm", "eight", "twelve", "half past six",
];
const FOODS: &[&str] = &[
    "sushi", "italian", "thai", "mexican", "indian", "turkish", "chinese", "french", "korean",
];
const PEOPLE: &[&str] = &["two", "three", "four", "five", "six", "2", "4", "ten"];
const AREAS: &[&str] = &["downtown", "the centre", "the airport", "the station", "midtown"];

/// Template pieces: literal words or a slot placeholder.
const TEMPLATES: &[&str] = &[
    "book a flight to {city} on {day}",
    "i need a flight from {city} to {city} at {time}",
    "find a {food} restaurant in {city}",
    "reserve a table for {people} people at {time}",
    "what is the weather in {city} on {day}",
    "i want to leave {city} after {time}",
    "show me {food} places near {area}",
    "can you find me a cheap {food} place near {area}",
    "i would like a train to {city} on {day} please",
    "get me a taxi to {area} at {time}",
    "is there a {food} restaurant open on {day}",
    "please book a table for {people} at a {food} restaurant",
    "list flights from {city} to {city}",
    "i am looking for a hotel in {city} for {people} people",
];

fn slot_values(slot: &str) -> &'static [&'static str] {
    match slot {
        "city" => CITIES,
        "day" => DAYS,
        "time" => TIMES,
        "food" => FOODS,
        "people" => PEOPLE,
        "area" => AREAS,
        _ => unreachable!("unknown slot {slot}"),
    }
}

fn fill_template(template: &str, rng: &mut Rng) -> (Vec<String>, Vec<String>) {
    let mut words = Vec::new();
    let mut labels = Vec::new();
    for piece in template.split_whitespace() {
        if let Some(slot) = piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            let value = slot_values(slot).choose(rng).expect("non-empty");
            for (i, w) in value.split_whitespace().enumerate() {
                words.push(w.to_string());
                labels.push(if i == 0 {
                    format!("B-{slot}")
                } else {
                    format!("I-{slot}")
                });
            }
        } else {
            words.push(piece.to_string());
            labels.push("O".to_string());
        }
    }
    (words, labels)
}

/// Labeled utterances drawn from the travel/restaurant templates.
pub fn slot_dataset(split: &str, n: usize, seed: u64) -> Dataset<LabeledUtterance> {
    let mut rng = rng::named_rng(seed, &format!("slot-dataset-{split}"));
    let items = (0..n)
        .map(|i| {
            let t = TEMPLATES.choose(&mut rng).expect("non-empty");
            let (w, l) = fill_template(t, &mut rng);
            LabeledUtterance::new(
                format!("{split}-{i}"),
                tokens(&w).expect("template words are tokens"),
                l,
            )
            .expect("templates produce valid BIO")
        })
        .collect();
    Dataset::new(split, items).expect("ids unique")
}

const HOMOPHONES: &[(&str, &[&str])] = &[
    ("to", &["2", "too", "two"]),
    ("for", &["4", "four"]),
    ("you", &["u"]),
    ("are", &["r"]),
    ("see", &["c"]),
    ("please", &["pls", "plz"]),
    ("flight", &["flite"]),
    ("night", &["nite"]),
    ("right", &["rite"]),
    ("eight", &["8", "ate"]),
    ("two", &["2", "to", "too"]),
    ("four", &["4", "for"]),
    ("twelve", &["12:00"]),
    ("one", &["1", "won"]),
    ("i", &["eye"]),
    ("need", &["knead"]),
    ("find", &["fined"]),
    ("me", &["mee"]),
    ("a", &["uh"]),
    ("the", &["da", "teh"]),
    ("table", &["tabel"]),
    ("place", &["plaice"]),
    ("places", &["plaices"]),
    ("near", &["neer"]),
    ("weather", &["whether"]),
    ("in", &["inn"]),
    ("on", &["onn"]),
    ("at", &["@"]),
    ("hotel", &["hotell"]),
    ("people", &["ppl"]),
    ("would", &["wood"]),
    ("new", &["knew", "gnu"]),
    ("boston", &["bostin"]),
    ("denver", &["denva"]),
    ("paris", &["pairs"]),
    ("london", &["lundun"]),
    ("seattle", &["seatle"]),
    ("miami", &["my ami"]),
    ("sushi", &["sooshi"]),
    ("thai", &["tie"]),
    ("indian", &["injun"]),
    ("monday", &["mundy"]),
    ("sunday", &["sundae"]),
    ("friday", &["fryday"]),
    ("noon", &["knoon"]),
    ("midnight", &["midnite"]),
    ("downtown", &["down town"]),
];

const SYNONYMS: &[(&str, &[&str])] = &[
    ("book", &["reserve", "arrange"]),
    ("find", &["locate", "search"]),
    ("need", &["require", "want"]),
    ("want", &["wish", "need"]),
    ("flight", &["plane", "airfare"]),
    ("restaurant", &["diner", "eatery"]),
    ("cheap", &["inexpensive", "budget"]),
    ("show", &["display", "give"]),
    ("places", &["spots", "venues"]),
    ("place", &["spot", "venue"]),
    ("hotel", &["inn", "lodge"]),
    ("leave", &["depart", "exit"]),
    ("looking", &["searching", "hunting"]),
    ("get", &["fetch", "obtain"]),
    ("list", &["enumerate", "show"]),
    ("near", &["close", "by"]),
    ("open", &["operating", "serving"]),
    ("reserve", &["book", "hold"]),
    ("taxi", &["cab"]),
    ("train", &["rail"]),
];

const DISTRACTORS: &[&str] = &[
    "by the way",
    "thank you so much",
    "lol",
    "have a nice day",
    "is that ok",
    "my cat says hi",
    "you know what i mean",
    "asap",
    "if possible",
    "or whatever",
    "cheers mate",
    "hope you are well",
];

const FILLERS: &[&str] = &[
    "um", "uh", "like", "so", "well", "hey", "ok", "yeah", "hmm", "lol", "pls", "really",
    "actually", "basically", "just",
];

const SOCIAL_EXTRAS: &[&str] = &[
    "#travel", "@airline", "#foodie", "@support", "#help", "omg", "btw", "tbh", "asap",
    "!!", "?", ".",
];

fn lexicon_text(entries: &[(&str, &[&str])]) -> String {
    entries
        .iter()
        .map(|(w, alts)| format!("{w}\t{}\n", alts.join(",")))
        .collect()
}

pub fn homophone_lexicon_text() -> String {
    lexicon_text(HOMOPHONES)
}

pub fn synonym_lexicon_text() -> String {
    lexicon_text(SYNONYMS)
}

pub fn distractor_lines() -> Vec<String> {
    DISTRACTORS.iter().map(|s| s.to_string()).collect()
}

/// Noisy, unlabeled sentences from the same domain: homophone spellings,
/// fillers, verbose additions, dropped function words and appended chatter.
pub fn perturbation_corpus(n: usize, seed: u64) -> Dataset<UnlabeledUtterance> {
    let mut rng = rng::named_rng(seed, "perturbation-corpus");
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let t = TEMPLATES.choose(&mut rng).expect("non-empty");
        let (words, _) = fill_template(t, &mut rng);
        let mut out: Vec<String> = Vec::new();
        if rng.random::<f64>() < 0.3 {
            out.push(FILLERS.choose(&mut rng).expect("non-empty").to_string());
        }
        for w in words {
            let r: f64 = rng.random();
            if r < 0.25 {
                if let Some((_, alts)) = HOMOPHONES.iter().find(|(k, _)| *k == w) {
                    let alt = alts.choose(&mut rng).expect("non-empty");
                    out.extend(alt.split_whitespace().map(str::to_string));
                    continue;
                }
            }
            if r > 0.92 && out.len() > 1 {
                continue;
            }
            if r > 0.85 && r <= 0.92 {
                out.push(FILLERS.choose(&mut rng).expect("non-empty").to_string());
            }
            out.push(w);
        }
        let tail: f64 = rng.random();
        if tail < 0.25 {
            let d = DISTRACTORS.choose(&mut rng).expect("non-empty");
            out.extend(d.split_whitespace().map(str::to_string));
        } else if tail < 0.45 {
            out.push(SOCIAL_EXTRAS.choose(&mut rng).expect("non-empty").to_string());
        }
        let toks = tokens(&out).expect("fixture words are tokens");
        items.push(UnlabeledUtterance::new(format!("corpus-{i}"), toks).expect("non-empty"));
    }
    Dataset::new("corpus", items).expect("ids unique")
}

/// File names written by [`write_fixture`].
pub mod files {
    pub const CORPUS: &str = "corpus.jsonl";
    pub const TRAIN: &str = "train.conll";
    pub const TEST: &str = "test.conll";
    pub const HOMOPHONES: &str = "homophones.tsv";
    pub const SYNONYMS: &str = "synonyms.tsv";
    pub const DISTRACTORS: &str = "distractors.txt";
}

#[derive(Debug, Clone, Copy)]
pub struct FixtureSizes {
    pub corpus: usize,
    pub train: usize,
    pub test: usize,
}

impl Default for FixtureSizes {
    fn default() -> Self {
        FixtureSizes {
            corpus: 3000,
            train: 300,
            test: 300,
        }
    }
}

/// Writes the synthetic task into `dir`.
pub fn write_fixture(dir: &Path, sizes: FixtureSizes, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_unlabeled(&perturbation_corpus(sizes.corpus, seed), dir.join(files::CORPUS))?;
    write_dataset(
        &slot_dataset("train", sizes.train, seed),
        dir.join(files::TRAIN),
        Format::Conll,
    )?;
    write_dataset(
        &slot_dataset("test", sizes.test, seed),
        dir.join(files::TEST),
        Format::Conll,
    )?;
    let put = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    put(files::HOMOPHONES, homophone_lexicon_text())?;
    put(files::SYNONYMS, synonym_lexicon_text())?;
    put(
        files::DISTRACTORS,
        distractor_lines().into_iter().map(|l| l + "\n").collect(),
    )?;
    Ok(())
}
