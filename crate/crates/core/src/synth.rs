//! Deterministic generator for the desk-scale datasets: a general-domain
//! corpus for language-model pretraining and a two-class review set.
//!
//! The general corpus is written in paragraphs that each keep one mood, so
//! predicting the next adjective requires tracking the mood of the passage.
//! Reviews add their own vocabulary, including sentiment words that never
//! appear in the general corpus.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::text::LabeledDoc;

const POS: &[&str] = &[
    "good", "great", "lovely", "fine", "bright", "warm", "happy", "pleasant", "superb", "charming", "wonderful",
    "delightful",
];
const NEG: &[&str] = &[
    "bad", "awful", "dull", "grim", "poor", "sad", "bleak", "nasty", "weak", "dreary", "horrible", "miserable",
];
const POS_VERBS: &[&str] = &["loved", "enjoyed", "liked", "admired", "praised"];
const NEG_VERBS: &[&str] = &["hated", "disliked", "loathed", "dreaded", "regretted"];
const REVIEW_POS: &[&str] = &["gripping", "riveting", "moving", "witty", "stunning", "masterful"];
const REVIEW_NEG: &[&str] = &["boring", "clumsy", "tedious", "bland", "clunky", "forgettable"];
const PLAIN: &[&str] = &["old", "long", "new", "small", "quiet", "large", "short", "early", "late", "red"];
const NOUNS: &[&str] = &[
    "house", "garden", "road", "city", "meal", "weather", "river", "town", "market", "trip", "morning", "song",
    "book", "room", "village", "journey", "dinner", "shop", "park", "street",
];
const REVIEW_NOUNS: &[&str] = &[
    "film", "movie", "plot", "acting", "script", "ending", "cast", "story", "scene", "soundtrack", "director",
    "dialogue",
];
const NAMES: &[&str] = &["anna", "tom", "maria", "james", "lucy", "peter", "sara", "omar"];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mood {
    Pos,
    Neg,
    Mixed,
}

fn pick<R: Rng + ?Sized>(words: &[&'static str], rng: &mut R) -> &'static str {
    words.choose(rng).copied().expect("non-empty word list")
}

fn mood_adj<R: Rng + ?Sized>(mood: Mood, rng: &mut R) -> &'static str {
    match mood {
        Mood::Pos => pick(POS, rng),
        Mood::Neg => pick(NEG, rng),
        Mood::Mixed => pick(if rng.random() { POS } else { NEG }, rng),
    }
}

fn mood_verb<R: Rng + ?Sized>(mood: Mood, rng: &mut R) -> &'static str {
    match mood {
        Mood::Pos => pick(POS_VERBS, rng),
        Mood::Neg => pick(NEG_VERBS, rng),
        Mood::Mixed => pick(if rng.random() { POS_VERBS } else { NEG_VERBS }, rng),
    }
}

fn general_sentence<R: Rng + ?Sized>(mood: Mood, rng: &mut R) -> String {
    let n = |rng: &mut R| pick(NOUNS, rng);
    match rng.random_range(0..6) {
        0 => format!("the {} was {} .", n(rng), mood_adj(mood, rng)),
        1 => format!("{} {} the {} .", pick(NAMES, rng), mood_verb(mood, rng), n(rng)),
        2 => format!(
            "it was a {} {} and a {} {} .",
            mood_adj(mood, rng),
            n(rng),
            mood_adj(mood, rng),
            n(rng)
        ),
        3 => format!("we thought the {} looked {} .", n(rng), mood_adj(mood, rng)),
        4 => format!(
            "the {} {} seemed {} to {} .",
            pick(PLAIN, rng),
            n(rng),
            mood_adj(mood, rng),
            pick(NAMES, rng)
        ),
        _ => format!("everyone {} the {} {} .", mood_verb(mood, rng), mood_adj(mood, rng), n(rng)),
    }
}

/// About `chars` characters of general-domain text, one paragraph per line.
pub fn general_corpus(chars: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(chars + 256);
    while out.len() < chars {
        let mood = match rng.random_range(0..5) {
            0 | 1 => Mood::Pos,
            2 | 3 => Mood::Neg,
            _ => Mood::Mixed,
        };
        let n = rng.random_range(3..7);
        let para: Vec<String> = (0..n).map(|_| general_sentence(mood, &mut rng)).collect();
        out.push_str(&para.join(" "));
        out.push('\n');
    }
    out
}

fn review_word<R: Rng + ?Sized>(positive: bool, rng: &mut R) -> &'static str {
    // Sentiment slots occasionally carry the opposite polarity.
    let positive = if rng.random::<f64>() < 0.15 { !positive } else { positive };
    let domain = rng.random::<bool>();
    match (positive, domain) {
        (true, true) => pick(REVIEW_POS, rng),
        (true, false) => pick(POS, rng),
        (false, true) => pick(REVIEW_NEG, rng),
        (false, false) => pick(NEG, rng),
    }
}

fn review_sentence<R: Rng + ?Sized>(positive: bool, rng: &mut R) -> String {
    let n = |rng: &mut R| pick(REVIEW_NOUNS, rng);
    match rng.random_range(0..6) {
        0 => format!("the {} was {} .", n(rng), review_word(positive, rng)),
        1 => {
            let mood = if positive { Mood::Pos } else { Mood::Neg };
            format!("i {} the {} .", mood_verb(mood, rng), n(rng))
        }
        2 => format!("a {} {} with a {} {} .", review_word(positive, rng), n(rng), pick(PLAIN, rng), n(rng)),
        3 => format!("{} was {} in this {} .", pick(NAMES, rng), review_word(positive, rng), n(rng)),
        4 => format!("the {} felt {} .", n(rng), pick(PLAIN, rng)),
        _ => format!("what a {} {} .", review_word(positive, rng), n(rng)),
    }
}

/// One review of 3 to 5 sentences.
pub fn review<R: Rng + ?Sized>(positive: bool, rng: &mut R) -> String {
    let n = rng.random_range(3..6);
    let s: Vec<String> = (0..n).map(|_| review_sentence(positive, rng)).collect();
    s.join(" ")
}

/// `n` reviews with alternating `pos`/`neg` labels.
pub fn reviews(n: usize, seed: u64) -> Vec<LabeledDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            LabeledDoc {
                label: if positive { "pos" } else { "neg" }.to_string(),
                text: review(positive, &mut rng),
            }
        })
        .collect()
}

/// Sizes and seed of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub corpus_chars: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            corpus_chars: 1_000_000,
            n_train: 2000,
            n_val: 500,
            seed: 1,
        }
    }
}

/// Paths written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub corpus: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub checksums: PathBuf,
}

pub fn labeled_tsv(docs: &[LabeledDoc]) -> String {
    docs.iter().map(|d| format!("{}\t{}\n", d.label, d.text)).collect()
}

/// Writes `corpus.txt`, `train.tsv`, `val.tsv` and `SHA256SUMS` into `dir`.
pub fn write_dataset(dir: &Path, spec: SynthSpec) -> std::io::Result<DatasetFiles> {
    std::fs::create_dir_all(dir)?;
    let corpus = general_corpus(spec.corpus_chars, spec.seed);
    let train = labeled_tsv(&reviews(spec.n_train, spec.seed.wrapping_add(1)));
    let val = labeled_tsv(&reviews(spec.n_val, spec.seed.wrapping_add(2)));
    let mut sums = String::new();
    for (name, body) in [("corpus.txt", &corpus), ("train.tsv", &train), ("val.tsv", &val)] {
        std::fs::write(dir.join(name), body)?;
        sums.push_str(&format!("{}  {name}\n", sha256_hex(body.as_bytes())));
    }
    let mut f = std::fs::File::create(dir.join("SHA256SUMS"))?;
    f.write_all(sums.as_bytes())?;
    Ok(DatasetFiles {
        corpus: dir.join("corpus.txt"),
        train: dir.join("train.tsv"),
        val: dir.join("val.tsv"),
        checksums: dir.join("SHA256SUMS"),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
