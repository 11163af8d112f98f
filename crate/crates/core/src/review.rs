//! Human review: relabelling of generated utterances and spot-the-fake
//! evaluation tasks, an append-only judgment log, and statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{self, FidelityReport, SEED_INTENT_META};
use crate::corpus::{IntentDataset, Origin, Utterance, OOS_LABEL};
use crate::error::{Error, Result};
use crate::util;

pub const OTHER: &str = "other";
pub const NONE: &str = "none";
pub const SPOT_FAKE_SIZE: usize = 5;
pub const DEFAULT_REPLACE_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Relabel,
    SpotFake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskPayload {
    Relabel {
        utterance: String,
        seed_intent: String,
        candidates: Vec<String>,
    },
    SpotFake {
        intent: String,
        sentences: Vec<String>,
    },
}

/// A task as clients see it. The answer key and the link back to the
/// generated data are never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    #[serde(flatten)]
    pub payload: TaskPayload,
    #[serde(skip)]
    pub hidden_truth: Option<usize>,
    #[serde(skip)]
    pub source_index: Option<usize>,
}

impl ReviewTask {
    pub fn kind(&self) -> TaskKind {
        match self.payload {
            TaskPayload::Relabel { .. } => TaskKind::Relabel,
            TaskPayload::SpotFake { .. } => TaskKind::SpotFake,
        }
    }

    /// Rejects answers the payload does not offer.
    pub fn validate_answer(&self, answer: &Answer) -> Result<()> {
        let ok = match (&self.payload, answer) {
            (TaskPayload::Relabel { candidates, .. }, Answer::Label(l)) => candidates.contains(l),
            (TaskPayload::SpotFake { sentences, .. }, Answer::Index(i)) => *i < sentences.len(),
            (TaskPayload::SpotFake { .. }, Answer::Label(l)) => l == NONE,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Review(format!(
                "answer {answer:?} is not valid for task `{}`",
                self.task_id
            )))
        }
    }
}

/// Persisted form of a task, answer key included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTask {
    #[serde(flatten)]
    task: ReviewTask,
    hidden_truth: Option<usize>,
    source_index: Option<usize>,
}

pub fn save_tasks(tasks: &[ReviewTask], path: &Path) -> Result<()> {
    let stored: Vec<StoredTask> = tasks
        .iter()
        .map(|t| StoredTask {
            task: t.clone(),
            hidden_truth: t.hidden_truth,
            source_index: t.source_index,
        })
        .collect();
    util::write_atomic(path, util::to_jsonl(&stored)?.as_bytes())
}

pub fn load_tasks(path: &Path) -> Result<Vec<ReviewTask>> {
    let stored: Vec<StoredTask> = util::from_jsonl(&util::read_to_string(path)?)?;
    let tasks: Vec<ReviewTask> = stored
        .into_iter()
        .map(|s| ReviewTask {
            hidden_truth: s.hidden_truth,
            source_index: s.source_index,
            ..s.task
        })
        .collect();
    check_unique_ids(&tasks)?;
    Ok(tasks)
}

fn check_unique_ids(tasks: &[ReviewTask]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in tasks {
        if !seen.insert(t.task_id.as_str()) {
            return Err(Error::Review(format!("duplicate task id `{}`", t.task_id)));
        }
    }
    Ok(())
}

/// A chosen intent (or `other` / `none`) or a sentence index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Index(usize),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub task_id: String,
    pub annotator_id: String,
    pub answer: Answer,
    #[serde(default)]
    pub timestamp: u64,
}

/// Relabel tasks over `generated`: candidates are the seed intent, its two
/// most frequent oracle confusions, the out-of-scope label and `other`.
pub fn build_relabel_tasks(generated: &[Utterance], confusion: &FidelityReport) -> Vec<ReviewTask> {
    generated
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let seed = classify::seed_intent_of(u).to_string();
            let mut candidates = vec![seed.clone()];
            for (alt, _) in confusion.top_confusions(&seed, usize::MAX) {
                if candidates.len() == 3 {
                    break;
                }
                if alt != OOS_LABEL && alt != OTHER {
                    candidates.push(alt);
                }
            }
            candidates.push(OOS_LABEL.to_string());
            candidates.push(OTHER.to_string());
            ReviewTask {
                task_id: format!("relabel-{:05}", i + 1),
                payload: TaskPayload::Relabel {
                    utterance: u.text.clone(),
                    seed_intent: seed,
                    candidates,
                },
                hidden_truth: None,
                source_index: Some(i),
            }
        })
        .collect()
}

/// `tasks_per_intent` tasks for every intent with generated data: five real
/// training sentences, one of which is replaced by a generated sentence of
/// the same intent with probability `replace_probability`.
pub fn build_spot_fake_tasks(
    ds: &IntentDataset,
    generated: &[Utterance],
    replace_probability: f64,
    tasks_per_intent: usize,
    seed: u64,
) -> Result<Vec<ReviewTask>> {
    if !(0.0..=1.0).contains(&replace_probability) {
        return Err(Error::Config(format!(
            "replace probability {replace_probability} is outside [0, 1]"
        )));
    }
    let mut by_intent: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in generated {
        by_intent.entry(u.intent.as_str()).or_default().push(u);
    }
    let mut tasks = Vec::new();
    for intent in ds.intents() {
        let real = ds.train_for(intent);
        if real.len() < SPOT_FAKE_SIZE {
            return Err(Error::Review(format!(
                "intent `{intent}` has {} real examples, {SPOT_FAKE_SIZE} needed",
                real.len()
            )));
        }
        let fakes = by_intent.get(intent.as_str());
        let mut rng = util::seeded_rng(seed, &format!("spot-fake\u{1f}{intent}"));
        for _ in 0..tasks_per_intent {
            let mut sentences: Vec<String> = index::sample(&mut rng, real.len(), SPOT_FAKE_SIZE)
                .into_iter()
                .map(|i| real[i].text.clone())
                .collect();
            let hidden_truth = if rng.random::<f64>() < replace_probability {
                let fake = fakes
                    .and_then(|f| f.choose(&mut rng))
                    .ok_or_else(|| Error::Review(format!("no generated data for `{intent}`")))?;
                let at = rng.random_range(0..SPOT_FAKE_SIZE);
                sentences[at] = fake.text.clone();
                Some(at)
            } else {
                None
            };
            tasks.push(ReviewTask {
                task_id: format!("spot-{:05}", tasks.len() + 1),
                payload: TaskPayload::SpotFake {
                    intent: intent.clone(),
                    sentences,
                },
                hidden_truth,
                source_index: None,
            });
        }
    }
    Ok(tasks)
}

fn task_index(tasks: &[ReviewTask]) -> BTreeMap<&str, &ReviewTask> {
    tasks.iter().map(|t| (t.task_id.as_str(), t)).collect()
}

/// Share of spot-the-fake judgments that missed: a wrong index when a fake
/// was present, anything but `none` when it was not.
pub fn human_error_rate(tasks: &[ReviewTask], judgments: &[Judgment]) -> Result<f64> {
    let index = task_index(tasks);
    let mut failed = 0usize;
    let mut total = 0usize;
    for j in judgments {
        let task = index
            .get(j.task_id.as_str())
            .ok_or_else(|| Error::Review(format!("judgment for unknown task `{}`", j.task_id)))?;
        if task.kind() != TaskKind::SpotFake {
            continue;
        }
        total += 1;
        let correct = match (task.hidden_truth, &j.answer) {
            (Some(truth), Answer::Index(i)) => *i == truth,
            (None, Answer::Label(l)) => l == NONE,
            _ => false,
        };
        failed += usize::from(!correct);
    }
    if total == 0 {
        return Err(Error::Metric("no spot-the-fake judgments".into()));
    }
    Ok(failed as f64 / total as f64)
}

/// Judged relabel tasks as training utterances carrying the chosen intent.
/// `other` drops the utterance. The first judgment of a task wins.
pub fn export_relabelled(
    tasks: &[ReviewTask],
    judgments: &[Judgment],
    generated: &[Utterance],
) -> Result<Vec<Utterance>> {
    let index = task_index(tasks);
    let mut done = BTreeSet::new();
    let mut out = Vec::new();
    for j in judgments {
        let Some(task) = index.get(j.task_id.as_str()) else {
            return Err(Error::Review(format!("judgment for unknown task `{}`", j.task_id)));
        };
        if task.kind() != TaskKind::Relabel || !done.insert(j.task_id.as_str()) {
            continue;
        }
        let Answer::Label(label) = &j.answer else {
            continue;
        };
        if label == OTHER {
            continue;
        }
        let source = task
            .source_index
            .and_then(|i| generated.get(i))
            .ok_or_else(|| Error::Review(format!("task `{}` has no source utterance", task.task_id)))?;
        let mut u = source.clone();
        u.source_meta
            .entry(SEED_INTENT_META.to_string())
            .or_insert_with(|| source.intent.clone());
        u.intent = label.clone();
        u.origin = Origin::Relabelled;
        out.push(u);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub tasks: usize,
    pub judged_tasks: usize,
    pub remaining: usize,
    pub judgments: usize,
    pub per_annotator: BTreeMap<String, usize>,
    pub spot_fake_judged: usize,
    pub human_error_rate: Option<f64>,
    pub relabel_judged: usize,
    pub relabel_changed: usize,
    pub relabel_dropped: usize,
}

pub fn review_stats(tasks: &[ReviewTask], judgments: &[Judgment]) -> Result<ReviewStats> {
    let index = task_index(tasks);
    let mut stats = ReviewStats {
        tasks: tasks.len(),
        judgments: judgments.len(),
        ..ReviewStats::default()
    };
    let mut judged = BTreeSet::new();
    for j in judgments {
        let task = index
            .get(j.task_id.as_str())
            .ok_or_else(|| Error::Review(format!("judgment for unknown task `{}`", j.task_id)))?;
        judged.insert(j.task_id.as_str());
        *stats.per_annotator.entry(j.annotator_id.clone()).or_default() += 1;
        match &task.payload {
            TaskPayload::SpotFake { .. } => stats.spot_fake_judged += 1,
            TaskPayload::Relabel { seed_intent, .. } => {
                stats.relabel_judged += 1;
                match &j.answer {
                    Answer::Label(l) if l == OTHER => stats.relabel_dropped += 1,
                    Answer::Label(l) if l != seed_intent => stats.relabel_changed += 1,
                    _ => {}
                }
            }
        }
    }
    stats.judged_tasks = judged.len();
    stats.remaining = tasks.len() - judged.len();
    stats.human_error_rate = if stats.spot_fake_judged > 0 {
        Some(human_error_rate(tasks, judgments)?)
    } else {
        None
    };
    Ok(stats)
}

/// Append-only JSON-lines judgment log.
#[derive(Debug)]
pub struct JudgmentLog {
    path: PathBuf,
    file: File,
    judgments: Vec<Judgment>,
}

impl JudgmentLog {
    /// Opens (creating if needed) and replays the log at `path`.
    pub fn open(path: &Path) -> Result<Self> {
        let judgments = if path.exists() {
            util::from_jsonl(&util::read_to_string(path)?)?
        } else {
            Vec::new()
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            judgments,
        })
    }

    pub fn judgments(&self) -> &[Judgment] {
        &self.judgments
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn has(&self, task_id: &str, annotator_id: &str) -> bool {
        self.judgments
            .iter()
            .any(|j| j.task_id == task_id && j.annotator_id == annotator_id)
    }

    /// Validates `judgment` against `task` and appends it.
    pub fn append(&mut self, task: &ReviewTask, judgment: Judgment) -> Result<()> {
        if task.task_id != judgment.task_id {
            return Err(Error::Review("judgment does not match task".into()));
        }
        if judgment.annotator_id.trim().is_empty() {
            return Err(Error::Review("annotator id is empty".into()));
        }
        task.validate_answer(&judgment.answer)?;
        if self.has(&judgment.task_id, &judgment.annotator_id) {
            return Err(Error::Review(format!(
                "`{}` already judged task `{}`",
                judgment.annotator_id, judgment.task_id
            )));
        }
        let mut line = serde_json::to_string(&judgment)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.judgments.push(judgment);
        Ok(())
    }
}

/// The first task nobody has judged and that is not leased to another
/// annotator.
pub fn next_task<'a>(
    tasks: &'a [ReviewTask],
    judgments: &[Judgment],
    leased_to_others: &BTreeSet<String>,
) -> Option<&'a ReviewTask> {
    let judged: BTreeSet<&str> = judgments.iter().map(|j| j.task_id.as_str()).collect();
    tasks
        .iter()
        .find(|t| !judged.contains(t.task_id.as_str()) && !leased_to_others.contains(&t.task_id))
}
