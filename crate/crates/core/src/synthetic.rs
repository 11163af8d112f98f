//! Seeded synthetic intent corpus with disjoint per-intent vocabularies.
//!
//! Every intent owns `clusters` concepts, each spelled `forms` ways; the
//! forms of one concept are synonyms of each other in the accompanying
//! lexicon. Sentences mix a few shared frame words with `content_words`
//! concept forms of their intent. Few seeds only cover part of the forms, so
//! paraphrasing through the lexicon adds coverage the way a language model's
//! lexical knowledge would.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, DatasetParts, IntentDataset, Splits, Utterance};
use crate::eda::SynonymLexicon;
use crate::error::Result;
use crate::util;

pub const FRAME_WORDS: [&str; 10] = [
    "please", "can", "you", "i", "want", "to", "the", "my", "a", "now",
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "za", "po", "ne", "vi", "sa", "du", "fe", "go", "hu", "ji", "bo",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub intents_per_domain: usize,
    pub clusters: usize,
    pub forms: usize,
    pub content_words: usize,
    pub train_per_intent: usize,
    pub val_per_intent: usize,
    pub test_per_intent: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// 3 domains x 3 intents.
    fn default() -> Self {
        Self {
            domains: 3,
            intents_per_domain: 3,
            clusters: 10,
            forms: 3,
            content_words: 2,
            train_per_intent: 100,
            val_per_intent: 20,
            test_per_intent: 30,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: IntentDataset,
    pub lexicon: SynonymLexicon,
    /// intent -> concept -> surface forms
    pub vocabulary: BTreeMap<String, Vec<Vec<String>>>,
}

impl SyntheticCorpus {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        let mut intents = Vec::new();
        let mut domains = BTreeMap::new();
        for d in 0..spec.domains {
            for i in 0..spec.intents_per_domain {
                let name = format!("domain{d}_intent{i}");
                domains.insert(name.clone(), format!("domain{d}"));
                intents.push(name);
            }
        }

        let mut vocabulary = BTreeMap::new();
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (n, intent) in intents.iter().enumerate() {
            let concepts: Vec<Vec<String>> = (0..spec.clusters)
                .map(|c| {
                    (0..spec.forms)
                        .map(|f| {
                            // Unique per (intent, concept, form): disjoint across intents.
                            let a = SYLLABLES[n % SYLLABLES.len()];
                            let b = SYLLABLES[c % SYLLABLES.len()];
                            let e = SYLLABLES[f % SYLLABLES.len()];
                            format!("{a}{b}{e}{n}x{c}y{f}")
                        })
                        .collect()
                })
                .collect();
            for forms in &concepts {
                for form in forms {
                    let others: Vec<String> = forms.iter().filter(|f| *f != form).cloned().collect();
                    if !others.is_empty() {
                        entries.insert(form.clone(), others);
                    }
                }
            }
            vocabulary.insert(intent.clone(), concepts);
        }
        let lexicon =
            SynonymLexicon::new(entries, FRAME_WORDS.iter().map(|w| w.to_string()));

        let sentence = |intent: &str, rng: &mut rand_chacha::ChaCha8Rng| {
            let concepts = &vocabulary[intent];
            let mut words: Vec<String> = Vec::new();
            let frame_len = rng.random_range(1..=3);
            for _ in 0..frame_len {
                words.push(FRAME_WORDS.choose(rng).expect("nonempty").to_string());
            }
            let take = spec.content_words.min(concepts.len());
            for c in index::sample(rng, concepts.len(), take) {
                words.push(concepts[c].choose(rng).expect("nonempty").clone());
            }
            words.join(" ")
        };

        let mut splits = Splits::default();
        for intent in &intents {
            let mut rng = util::seeded_rng(spec.seed, &format!("synthetic\u{1f}{intent}"));
            for (count, target) in [
                (spec.train_per_intent, &mut splits.train),
                (spec.val_per_intent, &mut splits.val),
                (spec.test_per_intent, &mut splits.test),
            ] {
                for _ in 0..count {
                    target.push(Utterance::seed(sentence(intent, &mut rng), intent.clone()));
                }
            }
        }

        let dataset = IntentDataset::from_parts(DatasetParts {
            name: format!("synthetic-{}x{}", spec.domains, spec.intents_per_domain),
            intents,
            domains: Some(domains),
            splits,
            oos: None,
        })?;
        Ok(Self {
            dataset,
            lexicon,
            vocabulary,
        })
    }

    /// Lexicon as `word<TAB>syn1,syn2` lines.
    pub fn lexicon_tsv(&self) -> String {
        let mut out = String::new();
        for concepts in self.vocabulary.values() {
            for forms in concepts {
                for form in forms {
                    let others: Vec<&str> = forms
                        .iter()
                        .filter(|f| *f != form)
                        .map(String::as_str)
                        .collect();
                    if !others.is_empty() {
                        out.push_str(&format!("{form}\t{}\n", others.join(",")));
                    }
                }
            }
        }
        out
    }

    pub fn stopwords_txt() -> String {
        FRAME_WORDS.iter().map(|w| format!("{w}\n")).collect()
    }

    /// Writes `dataset.json`, `lexicon.tsv` and `stopwords.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        corpus::save_native(&self.dataset, &dir.join("dataset.json"))?;
        util::write_atomic(&dir.join("lexicon.tsv"), self.lexicon_tsv().as_bytes())?;
        util::write_atomic(&dir.join("stopwords.txt"), Self::stopwords_txt().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn shape_and_disjointness() {
        let c = SyntheticCorpus::generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(c.dataset.intents().len(), 9);
        assert_eq!(c.dataset.train().len(), 900);
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        for u in c.dataset.train() {
            for w in u.text.split_whitespace() {
                if FRAME_WORDS.contains(&w) {
                    continue;
                }
                let prev = owner.insert(w.to_string(), u.intent.clone());
                assert!(prev.is_none() || prev.as_deref() == Some(u.intent.as_str()));
            }
        }
        let domains: BTreeSet<&String> = c.dataset.domains().unwrap().values().collect();
        assert_eq!(domains.len(), 3);
        let parsed = SynonymLexicon::parse(&c.lexicon_tsv(), &SyntheticCorpus::stopwords_txt()).unwrap();
        assert_eq!(parsed, c.lexicon);
    }
}
