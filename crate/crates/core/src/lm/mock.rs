//! Deterministic stand-in for a completion model.
//!
//! Generation prompts: each sample picks one of the prompt's examples and
//! paraphrases it with adjacent-word swaps, lexicon synonym substitution,
//! filler insertion and stopword deletion. More edits happen at higher
//! temperature, so low temperatures mostly copy seeds. With probability
//! `p_noise * temperature` (capped at 1) the sample is instead drawn from a
//! different intent of the context pool, preferring intents whose vocabulary
//! overlaps the prompt's seeds most.
//!
//! Classification prompts: the answer is the candidate whose examples share
//! the most words with the query, replaced with probability
//! `1 - classify_accuracy` by an abstention or a random candidate.
//!
//! All randomness comes from streams keyed by the prompt digest, the round and
//! the sample index. Temperature changes only the thresholds applied to those
//! draws, so the sample that drifts at temperature `t` also drifts at every
//! temperature above `t`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendKind, BackendResponse, CompletionBackend, CompletionRequest};
use crate::eda::SynonymLexicon;
use crate::error::{Error, Result};
use crate::prompting::{self, PromptStyle, RenderedPrompt};
use crate::util;

const FILLERS: [&str; 6] = ["please", "now", "just", "hey", "so", "um"];
const EDIT_TRIALS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub seed: u64,
    /// Cross-intent drift probability at temperature 1.0; scales linearly.
    pub p_noise: f64,
    /// Probability that a classification answer is the best-overlap candidate.
    pub classify_accuracy: f64,
    /// Share of the remaining classification answers that abstain.
    pub abstain_rate: f64,
    pub lexicon: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            p_noise: 0.2,
            classify_accuracy: 0.9,
            abstain_rate: 0.5,
            lexicon: None,
            stopwords: None,
        }
    }
}

impl MockConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_noise", self.p_noise),
            ("classify_accuracy", self.classify_accuracy),
            ("abstain_rate", self.abstain_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("mock {name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Drift probability at `temperature`.
    pub fn noise_at(&self, temperature: f64) -> f64 {
        (self.p_noise * temperature).clamp(0.0, 1.0)
    }
}

fn edit_probability(temperature: f64) -> f64 {
    (0.25 + 0.5 * temperature).min(0.95)
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    lexicon: SynonymLexicon,
    context: BTreeMap<String, Vec<String>>,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Result<Self> {
        config.validate()?;
        let lexicon = match &config.lexicon {
            Some(path) => SynonymLexicon::load(path, config.stopwords.as_deref())?,
            None => SynonymLexicon::bundled(),
        };
        Ok(Self {
            config,
            lexicon,
            context: BTreeMap::new(),
        })
    }

    pub fn with_lexicon(mut self, lexicon: SynonymLexicon) -> Self {
        self.lexicon = lexicon;
        self
    }

    /// Examples of other intents that generations may drift to.
    pub fn with_context(mut self, context: BTreeMap<String, Vec<String>>) -> Self {
        self.context = context;
        self
    }

    fn content_words(&self, text: &str) -> BTreeSet<String> {
        text.split_whitespace()
            .map(|w| w.to_lowercase())
            .filter(|w| !self.lexicon.is_stopword(w) && !FILLERS.contains(&w.as_str()))
            .collect()
    }

    /// Picks the drift target among the intents with the two highest vocabulary
    /// overlaps with the seeds.
    fn drift_target<R: Rng>(
        &self,
        pool: &BTreeMap<String, Vec<String>>,
        seed_intent: Option<&str>,
        seeds: &[String],
        rng: &mut R,
    ) -> Option<(String, String)> {
        let seed_words: BTreeSet<String> =
            seeds.iter().flat_map(|s| self.content_words(s)).collect();
        let scored: Vec<(usize, &String)> = pool
            .iter()
            .filter(|(intent, texts)| Some(intent.as_str()) != seed_intent && !texts.is_empty())
            .map(|(intent, texts)| {
                let words: BTreeSet<String> =
                    texts.iter().flat_map(|t| self.content_words(t)).collect();
                (words.intersection(&seed_words).count(), intent)
            })
            .collect();
        if scored.is_empty() {
            return None;
        }
        let mut levels: Vec<usize> = scored.iter().map(|(s, _)| *s).collect();
        levels.sort_unstable_by(|a, b| b.cmp(a));
        levels.dedup();
        let floor = levels.get(1).copied().unwrap_or(levels[0]);
        let close: Vec<&String> = scored
            .iter()
            .filter(|(s, _)| *s >= floor)
            .map(|(_, i)| *i)
            .collect();
        let intent = (*close.choose(rng)?).clone();
        let text = pool[&intent].choose(rng)?.clone();
        Some((text, intent))
    }

    fn paraphrase<R: Rng>(&self, text: &str, temperature: f64, rng: &mut R) -> String {
        let mut words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let p_edit = edit_probability(temperature);
        for _ in 0..EDIT_TRIALS {
            let apply = rng.random::<f64>() < p_edit;
            let kind = rng.random_range(0..4u8);
            let a = rng.random::<u64>();
            let b = rng.random::<u64>();
            if !apply || words.is_empty() {
                continue;
            }
            match kind {
                0 if words.len() >= 2 => {
                    let i = (a as usize) % (words.len() - 1);
                    words.swap(i, i + 1);
                }
                1 => {
                    let eligible: Vec<usize> = (0..words.len())
                        .filter(|&i| self.lexicon.is_eligible(&words[i]))
                        .collect();
                    if !eligible.is_empty() {
                        let pos = eligible[(a as usize) % eligible.len()];
                        let syns = self.lexicon.synonyms(&words[pos]).expect("eligible");
                        words[pos] = syns[(b as usize) % syns.len()].clone();
                    }
                }
                2 => {
                    let filler = FILLERS[(a as usize) % FILLERS.len()];
                    let pos = (b as usize) % (words.len() + 1);
                    words.insert(pos, filler.to_string());
                }
                _ => {
                    let stops: Vec<usize> = (0..words.len())
                        .filter(|&i| self.lexicon.is_stopword(&words[i]))
                        .collect();
                    if !stops.is_empty() && words.len() > 1 {
                        words.remove(stops[(a as usize) % stops.len()]);
                    }
                }
            }
        }
        words.join(" ")
    }

    fn generate(&self, request: &CompletionRequest, prompt: &RenderedPrompt) -> Vec<String> {
        let examples = prompting::prompt_examples(prompt);
        if examples.is_empty() {
            return Vec::new();
        }
        let labelled = matches!(
            prompt.template.style,
            PromptStyle::Gpt3Mix | PromptStyle::Gpt3MixMixed
        );
        let seed_texts: Vec<String> = examples.iter().map(|e| e.text.clone()).collect();
        let seed_intent = prompt.seed_intent.as_deref();
        let next_index = examples.len() + 1;
        let open = prompt.open_line().to_string();
        let p_noise = self.config.noise_at(request.temperature);

        (0..request.samples_per_call)
            .map(|sample| {
                let stream = format!("{}\u{1f}{}\u{1f}{sample}", prompt.digest, request.round);
                let mut noise_rng = util::seeded_rng(self.config.seed, &format!("noise\u{1f}{stream}"));
                let mut edit_rng = util::seeded_rng(self.config.seed, &format!("edit\u{1f}{stream}"));
                let drift_draw = noise_rng.random::<f64>();
                let drifted = if drift_draw < p_noise {
                    self.drift_target(&self.context, seed_intent, &seed_texts, &mut noise_rng)
                } else {
                    None
                };
                let (source, label) = drifted.unwrap_or_else(|| {
                    let e = examples.choose(&mut noise_rng).expect("nonempty");
                    let label = e
                        .intent
                        .clone()
                        .or_else(|| seed_intent.map(str::to_string))
                        .unwrap_or_default();
                    (e.text.clone(), label)
                });
                let text = self.paraphrase(&source, request.temperature, &mut edit_rng);
                let line = if labelled {
                    prompt.template.render_line(next_index, &text, &label)
                } else {
                    prompt.template.render_line(next_index, &text, "")
                };
                match line.strip_prefix(open.as_str()) {
                    Some(rest) => rest.to_string(),
                    None => format!(" {text}"),
                }
            })
            .collect()
    }

    fn classify(&self, request: &CompletionRequest, prompt: &RenderedPrompt) -> Vec<String> {
        let examples = prompting::prompt_examples(prompt);
        let query = prompting::prompt_query(prompt).unwrap_or_default();
        let query_words = self.content_words(&query);
        let candidates = &prompt.candidates;
        let mut vocab: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
        for e in &examples {
            if let Some(intent) = &e.intent {
                vocab
                    .entry(intent.as_str())
                    .or_default()
                    .extend(self.content_words(&e.text));
            }
        }
        let best = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let overlap = vocab
                    .get(c.as_str())
                    .map(|v| v.intersection(&query_words).count())
                    .unwrap_or(0);
                (overlap, std::cmp::Reverse(i), c)
            })
            .max()
            .map(|(_, _, c)| c.clone());

        (0..request.samples_per_call)
            .map(|sample| {
                let stream = format!("{}\u{1f}{}\u{1f}{sample}", prompt.digest, request.round);
                let mut rng = util::seeded_rng(self.config.seed, &format!("classify\u{1f}{stream}"));
                let draw = rng.random::<f64>();
                let acc = self.config.classify_accuracy;
                let answer = if draw < acc {
                    best.clone()
                } else if draw < acc + (1.0 - acc) * self.config.abstain_rate {
                    None
                } else {
                    candidates.choose(&mut rng).cloned()
                };
                match answer {
                    Some(intent) => format!(" {intent}"),
                    None => " none of these".to_string(),
                }
            })
            .collect()
    }
}

impl CompletionBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn fingerprint(&self) -> Option<String> {
        let mut parts = vec![
            self.config.seed.to_string(),
            format!("{:?}", self.config.p_noise),
            format!("{:?}", self.config.classify_accuracy),
            format!("{:?}", self.config.abstain_rate),
            self.lexicon.digest(),
        ];
        for (intent, texts) in &self.context {
            parts.push(intent.clone());
            parts.extend(texts.iter().cloned());
        }
        Some(util::digest_parts(&parts))
    }

    fn complete(
        &self,
        request: &CompletionRequest,
        prompt: &RenderedPrompt,
    ) -> std::result::Result<BackendResponse, BackendError> {
        let completions = match prompt.template.style {
            PromptStyle::ClassifyTriplet => self.classify(request, prompt),
            _ => self.generate(request, prompt),
        };
        Ok(BackendResponse {
            completions,
            cost_meta: None,
        })
    }
}
