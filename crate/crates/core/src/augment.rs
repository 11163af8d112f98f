//! Generation of `N - K` new utterances per few-shot intent by repeatedly
//! prompting a completion model with the intent's seeds.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, IndexedRandom};
use serde::{Deserialize, Serialize};

use crate::classify::SEED_INTENT_META;
use crate::corpus::{self, FewShotPlan, IntentDataset, Origin, Utterance};
use crate::error::{Error, Result};
use crate::lm::{CompletionRecord, LmClient};
use crate::prompting::{self, PromptStyle, PromptTemplate, RenderedPrompt};
use crate::util;

pub const DEFAULT_MAX_ROUNDS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationJob {
    pub plan: FewShotPlan,
    pub template: PromptTemplate,
    pub per_intent_target: usize,
    pub max_rounds: u32,
}

impl AugmentationJob {
    pub fn new(plan: FewShotPlan, template: PromptTemplate) -> Self {
        let per_intent_target = plan.per_intent_target();
        Self {
            plan,
            template,
            per_intent_target,
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

/// One line of the persisted generated-data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub text: String,
    /// Current label; differs from `seed_intent` after relabelling.
    pub intent: String,
    pub seed_intent: String,
    pub origin: Origin,
    pub engine: String,
    pub temperature: f64,
    pub prompt_digest: String,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_verdict: Option<serde_json::Value>,
}

impl GeneratedRecord {
    pub fn from_utterance(u: &Utterance) -> Self {
        let meta = |k: &str| u.source_meta.get(k).cloned().unwrap_or_default();
        Self {
            text: u.text.clone(),
            intent: u.intent.clone(),
            seed_intent: u
                .source_meta
                .get(SEED_INTENT_META)
                .cloned()
                .unwrap_or_else(|| u.intent.clone()),
            origin: u.origin,
            engine: meta("engine"),
            temperature: meta("temperature").parse().unwrap_or(0.0),
            prompt_digest: meta("prompt_digest"),
            round: meta("round").parse().unwrap_or(0),
            filter_verdict: u
                .source_meta
                .get("filter_verdict")
                .and_then(|v| serde_json::from_str(v).ok()),
        }
    }

    pub fn into_utterance(self) -> Utterance {
        let mut u = Utterance::new(self.text, self.intent, self.origin)
            .with_meta(SEED_INTENT_META, self.seed_intent)
            .with_meta("engine", self.engine)
            .with_meta("temperature", format!("{}", self.temperature))
            .with_meta("prompt_digest", self.prompt_digest)
            .with_meta("round", self.round.to_string());
        if let Some(v) = self.filter_verdict {
            u.source_meta.insert("filter_verdict".into(), v.to_string());
        }
        u
    }
}

pub fn to_jsonl(generated: &[Utterance]) -> Result<String> {
    let records: Vec<GeneratedRecord> = generated.iter().map(GeneratedRecord::from_utterance).collect();
    util::to_jsonl(&records)
}

pub fn from_jsonl(text: &str) -> Result<Vec<Utterance>> {
    Ok(util::from_jsonl::<GeneratedRecord>(text)?
        .into_iter()
        .map(GeneratedRecord::into_utterance)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub intent: String,
    pub wanted: usize,
    pub got: usize,
}

impl Shortfall {
    pub fn to_error(&self) -> Error {
        Error::Shortfall {
            intent: self.intent.clone(),
            wanted: self.wanted,
            got: self.got,
        }
    }
}

/// Generated utterances for one intent; `shortfall` is set when the target
/// was not reached within the round budget.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentGeneration {
    pub intent: String,
    pub utterances: Vec<Utterance>,
    pub shortfall: Option<Shortfall>,
    pub rounds_used: u32,
}

impl IntentGeneration {
    pub fn into_result(self) -> Result<Vec<Utterance>> {
        match self.shortfall {
            Some(s) => Err(s.to_error()),
            None => Ok(self.utterances),
        }
    }
}

/// Accumulates unique, non-seed generations for one intent.
struct Accumulator {
    intent: String,
    target: usize,
    seen: HashSet<String>,
    out: Vec<Utterance>,
    rounds_used: u32,
}

impl Accumulator {
    fn new(intent: &str, seeds: &[Utterance], target: usize) -> Self {
        Self {
            intent: intent.to_string(),
            target,
            seen: seeds.iter().map(|s| util::normalize_text(&s.text)).collect(),
            out: Vec::new(),
            rounds_used: 0,
        }
    }

    fn done(&self) -> bool {
        self.out.len() >= self.target
    }

    fn absorb(
        &mut self,
        record: &CompletionRecord,
        prompt: &RenderedPrompt,
        round: u32,
        inventory: &[String],
    ) {
        self.rounds_used = round + 1;
        let labelled = matches!(
            prompt.template.style,
            PromptStyle::Gpt3Mix | PromptStyle::Gpt3MixMixed
        );
        for completion in &record.completions {
            for parsed in prompting::parse_labelled(completion, prompt) {
                if self.done() {
                    return;
                }
                let label = if labelled {
                    match parsed.intent.filter(|i| inventory.contains(i)) {
                        Some(l) => l,
                        None => continue,
                    }
                } else {
                    self.intent.clone()
                };
                if !self.seen.insert(util::normalize_text(&parsed.text)) {
                    continue;
                }
                self.out.push(
                    Utterance::new(parsed.text, label, Origin::Generated)
                        .with_meta(SEED_INTENT_META, self.intent.clone())
                        .with_meta("engine", record.engine_name.clone())
                        .with_meta("temperature", format!("{}", record.temperature))
                        .with_meta("prompt_digest", prompt.digest.clone())
                        .with_meta("round", round.to_string()),
                );
            }
        }
    }

    fn finish(self) -> IntentGeneration {
        let got = self.out.len();
        IntentGeneration {
            shortfall: (got < self.target).then(|| Shortfall {
                intent: self.intent.clone(),
                wanted: self.target,
                got,
            }),
            intent: self.intent,
            utterances: self.out,
            rounds_used: self.rounds_used,
        }
    }
}

/// Builds the prompt for `intent` in `round`. Single-intent and mixed prompts
/// are identical across rounds; plain GPT3Mix prompts resample their examples.
fn prompt_for(
    job: &AugmentationJob,
    ds: &IntentDataset,
    intent: &str,
    seeds: &[Utterance],
    round: u32,
) -> Result<RenderedPrompt> {
    let seed_texts: Vec<String> = seeds.iter().map(|s| s.text.clone()).collect();
    match job.template.style {
        PromptStyle::SingleIntent => prompting::build_generation_prompt(
            &prompting::display_name(intent),
            intent,
            &seed_texts,
            &job.template,
        ),
        PromptStyle::Gpt3MixMixed => {
            let examples: Vec<(String, String)> = seed_texts
                .into_iter()
                .map(|t| (t, intent.to_string()))
                .collect();
            prompting::build_gpt3mix_prompt(ds.intents(), &examples, true, Some(intent), &job.template)
        }
        PromptStyle::Gpt3Mix => {
            // One example from each of K randomly chosen intents.
            let mut rng = util::seeded_rng(
                job.plan.rng_seed,
                &format!("gpt3mix\u{1f}{intent}\u{1f}{round}"),
            );
            let k = job.plan.k.min(ds.intents().len());
            let mut examples = Vec::new();
            for i in index::sample(&mut rng, ds.intents().len(), k) {
                let other = &ds.intents()[i];
                if let Some(u) = ds.train_for(other).choose(&mut rng) {
                    examples.push((u.text.clone(), other.clone()));
                }
            }
            prompting::build_gpt3mix_prompt(ds.intents(), &examples, false, Some(intent), &job.template)
        }
        PromptStyle::ClassifyTriplet => Err(Error::Prompt(
            "classification template cannot drive generation".into(),
        )),
    }
}

/// Generates up to `per_intent_target` utterances for one intent: prompt,
/// complete, parse, keep new texts; repeat for up to `max_rounds` rounds.
pub fn generate_for_intent(
    client: &LmClient,
    job: &AugmentationJob,
    ds: &IntentDataset,
    intent: &str,
    seeds: &[Utterance],
) -> Result<IntentGeneration> {
    if seeds.is_empty() {
        return Err(Error::InvalidPlan(format!("intent `{intent}` has no seeds")));
    }
    let mut acc = Accumulator::new(intent, seeds, job.per_intent_target);
    let mut round = 0;
    while !acc.done() && round < job.max_rounds {
        let prompt = prompt_for(job, ds, intent, seeds, round)?;
        let record = client.complete_round(&prompt, round)?;
        acc.absorb(&record, &prompt, round, ds.intents());
        round += 1;
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub dataset: IntentDataset,
    pub generated: Vec<Utterance>,
    pub shortfalls: Vec<Shortfall>,
}

/// Generates for every few-shot intent of `job.plan` and merges the results
/// into `ds` (which must already be truncated). Each round sends the prompts
/// of all unfinished intents as one batch.
pub fn augment_dataset(
    client: &LmClient,
    ds: &IntentDataset,
    job: &AugmentationJob,
) -> Result<AugmentOutcome> {
    job.plan.validate(ds)?;
    let intents: Vec<String> = job.plan.few_shot_intents.iter().cloned().collect();
    let seeds: BTreeMap<&str, Vec<Utterance>> = intents
        .iter()
        .map(|i| (i.as_str(), ds.train_for(i).into_iter().cloned().collect()))
        .collect();
    for (intent, s) in &seeds {
        if s.is_empty() {
            return Err(Error::InvalidPlan(format!("intent `{intent}` has no seeds")));
        }
    }
    let mut accs: Vec<Accumulator> = intents
        .iter()
        .map(|i| Accumulator::new(i, &seeds[i.as_str()], job.per_intent_target))
        .collect();

    for round in 0..job.max_rounds {
        let active: Vec<usize> = (0..accs.len()).filter(|&i| !accs[i].done()).collect();
        if active.is_empty() {
            break;
        }
        let prompts = active
            .iter()
            .map(|&i| prompt_for(job, ds, &intents[i], &seeds[intents[i].as_str()], round))
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(&RenderedPrompt, u32)> = prompts.iter().map(|p| (p, round)).collect();
        let records = client.complete_batch_rounds(&jobs);
        for ((&i, prompt), record) in active.iter().zip(&prompts).zip(records) {
            let record = record.map_err(|e| e.context(format!("generating for `{}`", intents[i])))?;
            accs[i].absorb(&record, prompt, round, ds.intents());
        }
    }

    let mut generated = Vec::new();
    let mut shortfalls = Vec::new();
    for acc in accs {
        let result = acc.finish();
        if let Some(s) = result.shortfall {
            log::warn!("{}", s.to_error());
            shortfalls.push(s);
        }
        generated.extend(result.utterances);
    }
    let dataset = corpus::merge_augmented(ds, &generated)?;
    Ok(AugmentOutcome {
        dataset,
        generated,
        shortfalls,
    })
}
