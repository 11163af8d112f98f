//! Easy Data Augmentation: synonym replacement, random insertion, random swap
//! and random deletion over whitespace tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Origin, Utterance};
use crate::error::{Error, Result};
use crate::util;

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");
const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
    stopwords: BTreeSet<String>,
}

impl SynonymLexicon {
    /// Builds a lexicon, dropping entries for stopwords and empty synonym lists.
    pub fn new(
        entries: BTreeMap<String, Vec<String>>,
        stopwords: impl IntoIterator<Item = String>,
    ) -> Self {
        let stopwords: BTreeSet<String> = stopwords.into_iter().map(|w| w.to_lowercase()).collect();
        let entries = entries
            .into_iter()
            .map(|(w, syns)| (w.to_lowercase(), syns))
            .filter(|(w, syns)| !syns.is_empty() && !stopwords.contains(w))
            .collect();
        Self { entries, stopwords }
    }

    /// Parses `word<TAB>syn1,syn2` lines and a one-word-per-line stopword list.
    /// Repeated words merge their synonym lists.
    pub fn parse(lexicon: &str, stopwords: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (lineno, line) in lexicon.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, syns) = line.split_once('\t').ok_or_else(|| {
                Error::Parse(format!("lexicon line {}: expected word<TAB>synonyms", lineno + 1))
            })?;
            let list = entries.entry(word.trim().to_lowercase()).or_default();
            for syn in syns.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                if !list.iter().any(|s| s == syn) {
                    list.push(syn.to_string());
                }
            }
        }
        let stop = stopwords
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string);
        Ok(Self::new(entries, stop))
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON, BUNDLED_STOPWORDS).expect("bundled lexicon parses")
    }

    pub fn load(lexicon: &Path, stopwords: Option<&Path>) -> Result<Self> {
        let stop = match stopwords {
            Some(p) => util::read_to_string(p)?,
            None => BUNDLED_STOPWORDS.to_string(),
        };
        Self::parse(&util::read_to_string(lexicon)?, &stop)
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        let key = word.to_lowercase();
        if self.stopwords.contains(&key) {
            return None;
        }
        self.entries.get(&key).map(Vec::as_slice)
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(&word.to_lowercase())
    }

    pub fn is_eligible(&self, word: &str) -> bool {
        self.synonyms(word).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stable content digest, for cache keys.
    pub fn digest(&self) -> String {
        let mut parts = Vec::new();
        for (w, syns) in &self.entries {
            parts.push(format!("{w}\t{}", syns.join(",")));
        }
        parts.push("--stop--".into());
        parts.extend(self.stopwords.iter().cloned());
        util::digest_parts(&parts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdaConfig {
    pub alpha_sr: f64,
    pub alpha_ri: f64,
    pub alpha_rs: f64,
    pub p_rd: f64,
    pub rng_seed: u64,
}

impl Default for EdaConfig {
    fn default() -> Self {
        Self {
            alpha_sr: 0.1,
            alpha_ri: 0.1,
            alpha_rs: 0.1,
            p_rd: 0.1,
            rng_seed: 0,
        }
    }
}

impl EdaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_sr", self.alpha_sr),
            ("alpha_ri", self.alpha_ri),
            ("alpha_rs", self.alpha_rs),
            ("p_rd", self.p_rd),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `max(1, ceil(alpha * len))`, tolerant of float noise in the product.
pub fn edit_count(alpha: f64, len: usize) -> usize {
    let raw = alpha * len as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).max(1)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize(words: &[String]) -> String {
    words.join(" ")
}

/// Replaces up to `n` distinct eligible positions with a random synonym.
pub fn synonym_replacement<R: Rng + ?Sized>(
    words: &[String],
    n: usize,
    lex: &SynonymLexicon,
    rng: &mut R,
) -> Vec<String> {
    let mut out = words.to_vec();
    let mut eligible: Vec<usize> = (0..words.len())
        .filter(|&i| lex.is_eligible(&words[i]))
        .collect();
    eligible.shuffle(rng);
    for &pos in eligible.iter().take(n) {
        let syns = lex.synonyms(&words[pos]).expect("eligible");
        out[pos] = syns.choose(rng).expect("nonempty").clone();
    }
    out
}

/// Inserts `n` synonyms of randomly chosen eligible words at random positions.
/// Without eligible words the input is returned unchanged.
pub fn random_insertion<R: Rng + ?Sized>(
    words: &[String],
    n: usize,
    lex: &SynonymLexicon,
    rng: &mut R,
) -> Vec<String> {
    let mut out = words.to_vec();
    let eligible: Vec<&String> = words.iter().filter(|w| lex.is_eligible(w)).collect();
    if eligible.is_empty() {
        return out;
    }
    for _ in 0..n {
        let word = eligible.choose(rng).expect("nonempty");
        let syn = lex
            .synonyms(word)
            .and_then(|s| s.choose(rng))
            .expect("eligible")
            .clone();
        let pos = rng.random_range(0..=out.len());
        out.insert(pos, syn);
    }
    out
}

/// Swaps `n` random pairs of distinct positions.
pub fn random_swap<R: Rng + ?Sized>(words: &[String], n: usize, rng: &mut R) -> Vec<String> {
    let mut out = words.to_vec();
    if out.len() < 2 {
        return out;
    }
    for _ in 0..n {
        let i = rng.random_range(0..out.len());
        let mut j = rng.random_range(0..out.len() - 1);
        if j >= i {
            j += 1;
        }
        out.swap(i, j);
    }
    out
}

/// Drops each word with probability `p`; never returns an empty list for a
/// nonempty input.
pub fn random_deletion<R: Rng + ?Sized>(words: &[String], p: f64, rng: &mut R) -> Vec<String> {
    if words.len() <= 1 {
        return words.to_vec();
    }
    let kept: Vec<String> = words
        .iter()
        .filter(|_| rng.random::<f64>() >= p)
        .cloned()
        .collect();
    if kept.is_empty() {
        vec![words.choose(rng).expect("nonempty").clone()]
    } else {
        kept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdaOp {
    SynonymReplacement,
    RandomInsertion,
    RandomSwap,
    RandomDeletion,
}

impl EdaOp {
    pub const ALL: [EdaOp; 4] = [
        EdaOp::SynonymReplacement,
        EdaOp::RandomInsertion,
        EdaOp::RandomSwap,
        EdaOp::RandomDeletion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EdaOp::SynonymReplacement => "sr",
            EdaOp::RandomInsertion => "ri",
            EdaOp::RandomSwap => "rs",
            EdaOp::RandomDeletion => "rd",
        }
    }

    pub fn apply<R: Rng + ?Sized>(
        self,
        words: &[String],
        cfg: &EdaConfig,
        lex: &SynonymLexicon,
        rng: &mut R,
    ) -> Vec<String> {
        let len = words.len();
        match self {
            EdaOp::SynonymReplacement => {
                synonym_replacement(words, edit_count(cfg.alpha_sr, len), lex, rng)
            }
            EdaOp::RandomInsertion => random_insertion(words, edit_count(cfg.alpha_ri, len), lex, rng),
            EdaOp::RandomSwap => random_swap(words, edit_count(cfg.alpha_rs, len), rng),
            EdaOp::RandomDeletion => random_deletion(words, cfg.p_rd, rng),
        }
    }
}

/// `count` variants of `seed`, each made by one uniformly chosen operation.
pub fn eda_augment(
    seed: &Utterance,
    count: usize,
    cfg: &EdaConfig,
    lex: &SynonymLexicon,
) -> Vec<Utterance> {
    let words = tokenize(&seed.text);
    if words.is_empty() {
        return Vec::new();
    }
    let mut rng = util::seeded_rng(cfg.rng_seed, &format!("eda\u{1f}{}\u{1f}{}", seed.intent, seed.text));
    (0..count)
        .map(|_| {
            let op = *EdaOp::ALL.choose(&mut rng).expect("nonempty");
            let edited = op.apply(&words, cfg, lex, &mut rng);
            Utterance::new(detokenize(&edited), seed.intent.clone(), Origin::Eda)
                .with_meta("eda_op", op.name())
                .with_meta("seed_text", seed.text.clone())
        })
        .collect()
}

/// Round-robin quota over seeds: seed `i` yields `target / K` variants plus
/// one more when `i < target % K`.
pub fn eda_for_intent(
    seeds: &[Utterance],
    target: usize,
    cfg: &EdaConfig,
    lex: &SynonymLexicon,
) -> Vec<Utterance> {
    if seeds.is_empty() {
        return Vec::new();
    }
    let k = seeds.len();
    seeds
        .iter()
        .enumerate()
        .flat_map(|(i, seed)| {
            let quota = target / k + usize::from(i < target % k);
            eda_augment(seed, quota, cfg, lex)
        })
        .collect()
}
