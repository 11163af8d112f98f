//! Rejection of generated utterances that a verdict source (an LM prompted
//! as a classifier over a few close intents, or the oracle) assigns to an
//! intent other than their seed intent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classify::{self, FidelityReport, IntentClassifier};
use crate::corpus::{IntentDataset, Utterance};
use crate::error::{Error, Result};
use crate::lm::{EngineRun, LmClient};
use crate::prompting::{self, PromptTemplate};
use crate::util;

pub const DEFAULT_VOTES: usize = 5;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const VERDICT_META: &str = "filter_verdict";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    OracleConfusion,
}

/// A seed intent and the intents its generations tend to drift to. The seed
/// intent is always first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseIntentGroup {
    pub intents: Vec<String>,
    pub seeds_per_intent: BTreeMap<String, Vec<String>>,
    pub selection_provenance: Provenance,
}

impl CloseIntentGroup {
    /// A hand-picked group; seeds come from the (truncated) training split.
    pub fn manual(ds: &IntentDataset, intents: &[String]) -> Result<Self> {
        Self::build(ds, intents.to_vec(), Provenance::Manual)
    }

    fn build(ds: &IntentDataset, intents: Vec<String>, provenance: Provenance) -> Result<Self> {
        if intents.len() < 2 {
            return Err(Error::InvalidPlan("a close-intent group needs at least two intents".into()));
        }
        let mut seeds_per_intent = BTreeMap::new();
        for intent in &intents {
            if !ds.contains_intent(intent) {
                return Err(Error::UnknownIntent {
                    intent: intent.clone(),
                    context: "close-intent group".into(),
                });
            }
            let seeds: Vec<String> = ds.train_for(intent).iter().map(|u| u.text.clone()).collect();
            if seeds_per_intent.insert(intent.clone(), seeds).is_some() {
                return Err(Error::DuplicateIntent(intent.clone()));
            }
        }
        Ok(Self {
            intents,
            seeds_per_intent,
            selection_provenance: provenance,
        })
    }

    pub fn seed_intent(&self) -> &str {
        &self.intents[0]
    }

    pub fn contains(&self, intent: &str) -> bool {
        self.intents.iter().any(|i| i == intent)
    }
}

/// The seed intent plus its `k - 1` most frequent oracle confusions.
pub fn select_close_intents(
    ds: &IntentDataset,
    confusion: &FidelityReport,
    seed_intent: &str,
    k: usize,
) -> Result<CloseIntentGroup> {
    if k < 2 {
        return Err(Error::InvalidPlan(format!("group size {k} is below 2")));
    }
    // Out-of-scope and unknown predictions cannot be group members.
    let confounders: Vec<(String, usize)> = confusion
        .top_confusions(seed_intent, usize::MAX)
        .into_iter()
        .filter(|(i, _)| ds.contains_intent(i))
        .take(k - 1)
        .collect();
    if confounders.len() < k - 1 {
        return Err(Error::InvalidPlan(format!(
            "`{seed_intent}` has {} observed confounders, {} needed",
            confounders.len(),
            k - 1
        )));
    }
    let mut intents = vec![seed_intent.to_string()];
    intents.extend(confounders.into_iter().map(|(i, _)| i));
    CloseIntentGroup::build(ds, intents, Provenance::OracleConfusion)
}

/// Votes for one utterance. `votes` counts only in-group answers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VoteTally {
    pub votes: BTreeMap<String, usize>,
    pub abstentions: usize,
    pub predicted: Option<String>,
}

impl VoteTally {
    /// Majority over the answers; ties go to whichever tied intent was
    /// sampled first; no in-group answer predicts nothing.
    pub fn from_answers(answers: &[Option<String>]) -> Self {
        let mut tally = VoteTally::default();
        let mut first_seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, answer) in answers.iter().enumerate() {
            match answer {
                Some(intent) => {
                    *tally.votes.entry(intent.clone()).or_default() += 1;
                    first_seen.entry(intent.as_str()).or_insert(i);
                }
                None => tally.abstentions += 1,
            }
        }
        tally.predicted = tally
            .votes
            .iter()
            .max_by_key(|(intent, count)| (**count, std::cmp::Reverse(first_seen[intent.as_str()])))
            .map(|(intent, _)| intent.clone());
        tally
    }

    pub fn samples(&self) -> usize {
        self.votes.values().sum::<usize>() + self.abstentions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub utterance: String,
    pub seed_intent: String,
    pub votes: BTreeMap<String, usize>,
    pub abstentions: usize,
    pub predicted: Option<String>,
    pub kept: bool,
}

impl FilterVerdict {
    pub fn new(utterance: &str, seed_intent: &str, tally: VoteTally) -> Self {
        let kept = tally.predicted.as_deref() == Some(seed_intent);
        Self {
            utterance: utterance.to_string(),
            seed_intent: seed_intent.to_string(),
            votes: tally.votes,
            abstentions: tally.abstentions,
            predicted: tally.predicted,
            kept,
        }
    }
}

/// Anything that can say which intent of a group an utterance belongs to.
pub trait VerdictSource {
    /// One tally per `(group, text)` query, in order.
    fn tally_batch(&self, queries: &[(&CloseIntentGroup, &str)]) -> Result<Vec<VoteTally>>;
}

/// Sampling parameters of the LM classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub votes: usize,
    pub temperature: f64,
    pub group_size: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            votes: DEFAULT_VOTES,
            temperature: DEFAULT_TEMPERATURE,
            group_size: 3,
        }
    }
}

/// An LM prompted with labelled seeds of the group, sampled `votes` times.
pub struct LmVerdicts {
    client: LmClient,
    template: PromptTemplate,
}

impl LmVerdicts {
    /// Derives a classification client from `generation`: same backend and
    /// cache, the filter's temperature, one completion per vote and a
    /// single-line stop sequence.
    pub fn new(generation: &LmClient, cfg: &FilterConfig) -> Result<Self> {
        if cfg.votes == 0 {
            return Err(Error::Config("filter votes must be at least 1".into()));
        }
        let template = PromptTemplate::classify_triplet();
        let run = EngineRun {
            temperature: cfg.temperature,
            samples_per_call: cfg.votes,
            stop_sequence: template.stop_sequence.clone(),
            ..generation.run().clone()
        };
        Ok(Self {
            client: generation.with_run(run)?,
            template,
        })
    }

    pub fn client(&self) -> &LmClient {
        &self.client
    }
}

impl VerdictSource for LmVerdicts {
    fn tally_batch(&self, queries: &[(&CloseIntentGroup, &str)]) -> Result<Vec<VoteTally>> {
        let prompts = queries
            .iter()
            .map(|(group, text)| {
                // Shuffle keyed by the query so prompts are reproducible.
                let shuffle = util::digest_parts(&[group.seed_intent(), text]);
                let seed = u64::from_str_radix(&shuffle[..16], 16).expect("hex digest");
                prompting::build_classification_prompt(
                    &group.intents,
                    &group.seeds_per_intent,
                    text,
                    seed,
                    &self.template,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        self.client
            .complete_batch(&prompts)
            .into_iter()
            .zip(queries)
            .map(|(record, (group, _))| {
                let answers: Vec<Option<String>> = record?
                    .completions
                    .iter()
                    .map(|c| prompting::parse_intent_prediction(c, &group.intents))
                    .collect();
                Ok(VoteTally::from_answers(&answers))
            })
            .collect()
    }
}

/// The oracle's unrestricted prediction as a single vote.
pub struct OracleVerdicts<'a>(pub &'a dyn IntentClassifier);

impl VerdictSource for OracleVerdicts<'_> {
    fn tally_batch(&self, queries: &[(&CloseIntentGroup, &str)]) -> Result<Vec<VoteTally>> {
        let texts: Vec<&str> = queries.iter().map(|(_, t)| *t).collect();
        Ok(self
            .0
            .predict_all(&texts)?
            .into_iter()
            .map(|p| VoteTally::from_answers(&[Some(p.intent)]))
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub kept: usize,
    pub rejected: usize,
    /// Utterances for which every sample abstained.
    pub undecided: usize,
    pub fidelity_before: Option<f64>,
    pub fidelity_after: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<Utterance>,
    pub rejected: Vec<Utterance>,
    pub verdicts: Vec<FilterVerdict>,
    pub stats: FilterStats,
}

/// Splits `generated` into kept and rejected. Every utterance is judged
/// within the group of its seed intent; each output carries its verdict as
/// JSON under [`VERDICT_META`].
pub fn filter_generated(
    source: &dyn VerdictSource,
    groups: &BTreeMap<String, CloseIntentGroup>,
    generated: &[Utterance],
    oracle: Option<&dyn IntentClassifier>,
) -> Result<FilterOutcome> {
    let mut queries = Vec::with_capacity(generated.len());
    for u in generated {
        let seed = classify::seed_intent_of(u);
        let group = groups.get(seed).ok_or_else(|| Error::UnknownIntent {
            intent: seed.to_string(),
            context: "no close-intent group for this seed intent".into(),
        })?;
        if !group.contains(seed) {
            return Err(Error::InvalidPlan(format!("group for `{seed}` does not contain it")));
        }
        queries.push((group, u.text.as_str()));
    }
    let tallies = if queries.is_empty() {
        Vec::new()
    } else {
        source.tally_batch(&queries)?
    };

    let mut out = FilterOutcome::default();
    for (u, tally) in generated.iter().zip(tallies) {
        if tally.predicted.is_none() {
            out.stats.undecided += 1;
        }
        let verdict = FilterVerdict::new(&u.text, classify::seed_intent_of(u), tally);
        let mut tagged = u.clone();
        tagged
            .source_meta
            .insert(VERDICT_META.into(), serde_json::to_string(&verdict)?);
        if verdict.kept {
            out.kept.push(tagged);
        } else {
            out.rejected.push(tagged);
        }
        out.verdicts.push(verdict);
    }
    out.stats.input = generated.len();
    out.stats.kept = out.kept.len();
    out.stats.rejected = out.rejected.len();
    if let Some(oracle) = oracle {
        out.stats.fidelity_before = classify::fidelity(oracle, generated)?.overall;
        out.stats.fidelity_after = classify::fidelity(oracle, &out.kept)?.overall;
    }
    Ok(out)
}

/// Group-restricted accuracy of three classifiers on the same utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeWayReport {
    pub intents: Vec<String>,
    pub evaluated: usize,
    pub lm: f64,
    pub few_shot: f64,
    pub full_data: f64,
}

/// Highest-scoring class among `allowed`.
fn restricted_argmax(clf: &dyn IntentClassifier, text: &str, allowed: &[String]) -> Result<String> {
    let p = clf.predict(text)?;
    let classes = clf.classes();
    if p.scores.len() != classes.len() {
        // No per-class scores: fall back to the plain label.
        return Ok(p.intent);
    }
    let mut best: Option<(f64, &String)> = None;
    for (c, s) in classes.iter().zip(&p.scores) {
        if allowed.contains(c) && best.is_none_or(|(b, _)| *s > b) {
            best = Some((*s, c));
        }
    }
    Ok(best.map(|(_, c)| c.clone()).unwrap_or(p.intent))
}

/// Accuracy of the LM verdict source, a few-shot classifier and a full-data
/// classifier on the items of `eval` whose gold intent is in `group`, each
/// restricted to choosing among the group's intents.
pub fn three_way_accuracy(
    group: &CloseIntentGroup,
    source: &dyn VerdictSource,
    few_shot: &dyn IntentClassifier,
    full_data: &dyn IntentClassifier,
    eval: &[Utterance],
) -> Result<ThreeWayReport> {
    let items: Vec<&Utterance> = eval.iter().filter(|u| group.contains(&u.intent)).collect();
    if items.is_empty() {
        return Err(Error::Metric("no evaluation items belong to the group".into()));
    }
    let queries: Vec<(&CloseIntentGroup, &str)> = items.iter().map(|u| (group, u.text.as_str())).collect();
    let tallies = source.tally_batch(&queries)?;
    let mut hits = [0usize; 3];
    for (u, tally) in items.iter().zip(&tallies) {
        hits[0] += usize::from(tally.predicted.as_deref() == Some(u.intent.as_str()));
        hits[1] += usize::from(restricted_argmax(few_shot, &u.text, &group.intents)? == u.intent);
        hits[2] += usize::from(restricted_argmax(full_data, &u.text, &group.intents)? == u.intent);
    }
    let n = items.len() as f64;
    Ok(ThreeWayReport {
        intents: group.intents.clone(),
        evaluated: items.len(),
        lm: hits[0] as f64 / n,
        few_shot: hits[1] as f64 / n,
        full_data: hits[2] as f64 / n,
    })
}
