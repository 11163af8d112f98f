//! Intent datasets: loading, validation, few-shot truncation, upsampling and
//! merging of generated data.
//!
//! All transformations take `&IntentDataset` and return a new value. Val and
//! test splits pass through every transformation untouched.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::{index, IndexedRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Reserved label for out-of-scope utterances.
pub const OOS_LABEL: &str = "oos";

/// Seed used for the stratified train/val resplit of table datasets that ship
/// without a validation split.
pub const RESPLIT_SEED: u64 = 20_211_101;

/// Fraction of each intent's training examples moved to validation by the resplit.
pub const RESPLIT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Seed,
    Generated,
    Eda,
    Relabelled,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Origin::Seed => "seed",
            Origin::Generated => "generated",
            Origin::Eda => "eda",
            Origin::Relabelled => "relabelled",
        };
        f.write_str(s)
    }
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub intent: String,
    pub origin: Origin,
    /// Free-form provenance: engine, temperature, prompt digest, original seed intent.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub source_meta: BTreeMap<String, String>,
}

impl Utterance {
    pub fn new(text: impl Into<String>, intent: impl Into<String>, origin: Origin) -> Self {
        Self {
            text: text.into(),
            intent: intent.into(),
            origin,
            source_meta: BTreeMap::new(),
        }
    }

    pub fn seed(text: impl Into<String>, intent: impl Into<String>) -> Self {
        Self::new(text, intent, Origin::Seed)
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.source_meta.insert(key.into(), value.into());
        self
    }

    pub fn is_oos(&self) -> bool {
        self.intent == OOS_LABEL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Train/val/test lists of utterances.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Unvalidated dataset contents; turn into an [`IntentDataset`] with
/// [`IntentDataset::from_parts`].
#[derive(Debug, Clone, Default)]
pub struct DatasetParts {
    pub name: String,
    pub intents: Vec<String>,
    pub domains: Option<BTreeMap<String, String>>,
    pub splits: Splits,
    pub oos: Option<Splits>,
}

/// A validated intent classification dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentDataset {
    name: String,
    intents: Vec<String>,
    domains: Option<BTreeMap<String, String>>,
    splits: Splits,
    oos: Option<Splits>,
}

impl IntentDataset {
    pub fn from_parts(parts: DatasetParts) -> Result<Self> {
        let DatasetParts {
            name,
            intents,
            domains,
            splits,
            oos,
        } = parts;

        let mut seen = HashSet::new();
        for intent in &intents {
            if intent == OOS_LABEL {
                return Err(Error::InvalidUtterance(format!(
                    "`{OOS_LABEL}` is reserved and cannot be an in-scope intent"
                )));
            }
            if intent.trim().is_empty() {
                return Err(Error::Parse("empty intent name".into()));
            }
            if !seen.insert(intent.as_str()) {
                return Err(Error::DuplicateIntent(intent.clone()));
            }
        }

        if let Some(domains) = &domains {
            for intent in domains.keys() {
                if !seen.contains(intent.as_str()) {
                    return Err(Error::UnknownIntent {
                        intent: intent.clone(),
                        context: "domain map".into(),
                    });
                }
            }
        }

        for split in Split::ALL {
            let items = splits.get(split);
            if items.is_empty() {
                return Err(Error::EmptySplit(split.name().into()));
            }
            for u in items {
                check_text(u)?;
                if !seen.contains(u.intent.as_str()) {
                    return Err(Error::UnknownIntent {
                        intent: u.intent.clone(),
                        context: format!("{} split", split.name()),
                    });
                }
            }
        }

        if let Some(oos) = &oos {
            for split in Split::ALL {
                for u in oos.get(split) {
                    check_text(u)?;
                    if !u.is_oos() {
                        return Err(Error::InvalidUtterance(format!(
                            "oos_{} contains in-scope label `{}`",
                            split.name(),
                            u.intent
                        )));
                    }
                }
            }
        }

        Ok(Self {
            name,
            intents,
            domains,
            splits,
            oos,
        })
    }

    pub fn into_parts(self) -> DatasetParts {
        DatasetParts {
            name: self.name,
            intents: self.intents,
            domains: self.domains,
            splits: self.splits,
            oos: self.oos,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn domains(&self) -> Option<&BTreeMap<String, String>> {
        self.domains.as_ref()
    }

    pub fn split(&self, split: Split) -> &[Utterance] {
        self.splits.get(split)
    }

    pub fn train(&self) -> &[Utterance] {
        &self.splits.train
    }

    pub fn val(&self) -> &[Utterance] {
        &self.splits.val
    }

    pub fn test(&self) -> &[Utterance] {
        &self.splits.test
    }

    pub fn has_oos(&self) -> bool {
        self.oos.is_some()
    }

    pub fn oos_split(&self, split: Split) -> Option<&[Utterance]> {
        self.oos.as_ref().map(|o| o.get(split))
    }

    pub fn contains_intent(&self, intent: &str) -> bool {
        self.intents.iter().any(|i| i == intent)
    }

    /// In-scope utterances of `split` followed by its OOS utterances.
    pub fn with_oos(&self, split: Split) -> Vec<Utterance> {
        let mut out = self.split(split).to_vec();
        if let Some(oos) = self.oos_split(split) {
            out.extend_from_slice(oos);
        }
        out
    }

    /// Training examples of `intent`, in dataset order.
    pub fn train_for(&self, intent: &str) -> Vec<&Utterance> {
        self.splits
            .train
            .iter()
            .filter(|u| u.intent == intent)
            .collect()
    }

    /// Per-intent train counts in inventory order (zero counts included).
    pub fn train_counts(&self) -> Vec<(String, usize)> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for u in &self.splits.train {
            *counts.entry(u.intent.as_str()).or_default() += 1;
        }
        self.intents
            .iter()
            .map(|i| (i.clone(), counts.get(i.as_str()).copied().unwrap_or(0)))
            .collect()
    }

    /// Returns a copy with the train split replaced (validation re-run).
    fn with_train(&self, train: Vec<Utterance>) -> Result<Self> {
        let mut parts = self.clone().into_parts();
        parts.splits.train = train;
        Self::from_parts(parts)
    }
}

fn check_text(u: &Utterance) -> Result<()> {
    if u.text.trim().is_empty() {
        return Err(Error::InvalidUtterance(format!(
            "empty text for intent `{}`",
            u.intent
        )));
    }
    Ok(())
}

/// Which intents are few-shot (`D_F`) and which keep their full data (`D_M`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotPlan {
    pub few_shot_intents: BTreeSet<String>,
    pub data_rich_intents: BTreeSet<String>,
    pub k: usize,
    pub n: usize,
    pub rng_seed: u64,
}

impl FewShotPlan {
    /// Every intent few-shot.
    pub fn full(ds: &IntentDataset, k: usize, n: usize, rng_seed: u64) -> Result<Self> {
        let plan = Self {
            few_shot_intents: ds.intents().iter().cloned().collect(),
            data_rich_intents: BTreeSet::new(),
            k,
            n,
            rng_seed,
        };
        plan.validate(ds)?;
        Ok(plan)
    }

    pub fn validate(&self, ds: &IntentDataset) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::InvalidPlan("K and N must be positive".into()));
        }
        if self.k > self.n {
            return Err(Error::InvalidPlan(format!(
                "K = {} exceeds N = {}",
                self.k, self.n
            )));
        }
        if let Some(i) = self.few_shot_intents.intersection(&self.data_rich_intents).next() {
            return Err(Error::InvalidPlan(format!(
                "intent `{i}` is both few-shot and data-rich"
            )));
        }
        for intent in self.few_shot_intents.iter().chain(&self.data_rich_intents) {
            if !ds.contains_intent(intent) {
                return Err(Error::UnknownIntent {
                    intent: intent.clone(),
                    context: "few-shot plan".into(),
                });
            }
        }
        let covered = self.few_shot_intents.len() + self.data_rich_intents.len();
        if covered != ds.intents().len() {
            return Err(Error::InvalidPlan(format!(
                "plan covers {covered} of {} intents",
                ds.intents().len()
            )));
        }
        Ok(())
    }

    /// Number of examples to generate per few-shot intent.
    pub fn per_intent_target(&self) -> usize {
        self.n.saturating_sub(self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    ClincJson,
    HwuTable,
    BankingTable,
    SnipsJson,
    Native,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clinc_json" | "clinc" => Ok(Self::ClincJson),
            "hwu_table" | "hwu" => Ok(Self::HwuTable),
            "banking_table" | "banking" => Ok(Self::BankingTable),
            "snips_json" | "snips" => Ok(Self::SnipsJson),
            "native" => Ok(Self::Native),
            other => Err(Error::Parse(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// A warning emitted when a few-shot intent has fewer than K examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationWarning {
    pub intent: String,
    pub available: usize,
    pub k: usize,
}

/// Native on-disk representation.
#[derive(Debug, Serialize, Deserialize)]
struct NativeFile {
    name: String,
    intents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domains: Option<BTreeMap<String, String>>,
    train: Vec<(String, String)>,
    val: Vec<(String, String)>,
    test: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oos_train: Option<Vec<(String, String)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oos_val: Option<Vec<(String, String)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oos_test: Option<Vec<(String, String)>>,
}

fn pairs_to_utterances(pairs: Vec<(String, String)>) -> Vec<Utterance> {
    pairs
        .into_iter()
        .map(|(text, intent)| Utterance::seed(text, intent))
        .collect()
}

fn utterances_to_pairs(items: &[Utterance]) -> Vec<(String, String)> {
    items
        .iter()
        .map(|u| (u.text.clone(), u.intent.clone()))
        .collect()
}

/// Loads a dataset from `path` in the given format.
///
/// * `native` and `clinc_json` / `snips_json` read a single JSON file.
/// * `hwu_table` / `banking_table` read a directory holding `train.csv`,
///   `test.csv` and optionally `val.csv`, each with `text,category` columns.
///   Without `val.csv` the train split is resplit 90/10 per intent.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<IntentDataset> {
    let ds = match format {
        DatasetFormat::Native => load_native(path),
        DatasetFormat::ClincJson => load_clinc(path),
        DatasetFormat::SnipsJson => load_snips(path),
        DatasetFormat::HwuTable => load_table(path, true),
        DatasetFormat::BankingTable => load_table(path, false),
    };
    ds.map_err(|e| e.context(format!("loading {}", path.display())))
}

fn load_native(path: &Path) -> Result<IntentDataset> {
    let file: NativeFile = serde_json::from_str(&util::read_to_string(path)?)?;
    let oos = if file.oos_train.is_some() || file.oos_val.is_some() || file.oos_test.is_some() {
        Some(Splits {
            train: pairs_to_utterances(file.oos_train.unwrap_or_default()),
            val: pairs_to_utterances(file.oos_val.unwrap_or_default()),
            test: pairs_to_utterances(file.oos_test.unwrap_or_default()),
        })
    } else {
        None
    };
    IntentDataset::from_parts(DatasetParts {
        name: file.name,
        intents: file.intents,
        domains: file.domains,
        splits: Splits {
            train: pairs_to_utterances(file.train),
            val: pairs_to_utterances(file.val),
            test: pairs_to_utterances(file.test),
        },
        oos,
    })
}

/// Serializes a dataset in the native format.
pub fn to_native_json(ds: &IntentDataset) -> Result<String> {
    let oos = |split| ds.oos_split(split).map(utterances_to_pairs);
    let file = NativeFile {
        name: ds.name.clone(),
        intents: ds.intents.clone(),
        domains: ds.domains.clone(),
        train: utterances_to_pairs(ds.train()),
        val: utterances_to_pairs(ds.val()),
        test: utterances_to_pairs(ds.test()),
        oos_train: oos(Split::Train),
        oos_val: oos(Split::Val),
        oos_test: oos(Split::Test),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_native(ds: &IntentDataset, path: &Path) -> Result<()> {
    util::write_atomic(path, to_native_json(ds)?.as_bytes())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Sorted, deduplicated inventory over the given utterances.
fn inventory_of<'a>(items: impl IntoIterator<Item = &'a Utterance>) -> Vec<String> {
    items
        .into_iter()
        .map(|u| u.intent.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Deserialize)]
struct ClincFile {
    train: Vec<(String, String)>,
    val: Vec<(String, String)>,
    test: Vec<(String, String)>,
    #[serde(default)]
    oos_train: Vec<(String, String)>,
    #[serde(default)]
    oos_val: Vec<(String, String)>,
    #[serde(default)]
    oos_test: Vec<(String, String)>,
}

/// CLINC150 `data_full.json`. Domain annotations are read from a sibling
/// `domains.json` (`{domain: [intent, ...]}`) when present.
fn load_clinc(path: &Path) -> Result<IntentDataset> {
    let file: ClincFile = serde_json::from_str(&util::read_to_string(path)?)?;
    let splits = Splits {
        train: pairs_to_utterances(file.train),
        val: pairs_to_utterances(file.val),
        test: pairs_to_utterances(file.test),
    };
    let intents = inventory_of(Split::ALL.iter().flat_map(|s| splits.get(*s)));
    let has_oos =
        !(file.oos_train.is_empty() && file.oos_val.is_empty() && file.oos_test.is_empty());
    let oos = has_oos.then(|| Splits {
        train: pairs_to_utterances(file.oos_train),
        val: pairs_to_utterances(file.oos_val),
        test: pairs_to_utterances(file.oos_test),
    });

    let domains_path = path.with_file_name("domains.json");
    let domains = if domains_path.exists() {
        let grouped: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&util::read_to_string(&domains_path)?)?;
        let mut map = BTreeMap::new();
        for (domain, members) in grouped {
            for intent in members {
                map.insert(intent, domain.clone());
            }
        }
        Some(map)
    } else {
        None
    };

    IntentDataset::from_parts(DatasetParts {
        name: file_stem(path),
        intents,
        domains,
        splits,
        oos,
    })
}

#[derive(Deserialize)]
struct SnipsRecord {
    text: String,
    intent: String,
}

#[derive(Deserialize)]
struct SnipsFile {
    train: Vec<SnipsRecord>,
    #[serde(alias = "valid", alias = "validation")]
    val: Vec<SnipsRecord>,
    test: Vec<SnipsRecord>,
}

/// SNIPS as `{train|val|test: [{text, intent}, ...]}`.
fn load_snips(path: &Path) -> Result<IntentDataset> {
    let file: SnipsFile = serde_json::from_str(&util::read_to_string(path)?)?;
    let convert = |records: Vec<SnipsRecord>| {
        records
            .into_iter()
            .map(|r| Utterance::seed(r.text, r.intent))
            .collect::<Vec<_>>()
    };
    let splits = Splits {
        train: convert(file.train),
        val: convert(file.val),
        test: convert(file.test),
    };
    let intents = inventory_of(Split::ALL.iter().flat_map(|s| splits.get(*s)));
    IntentDataset::from_parts(DatasetParts {
        name: file_stem(path),
        intents,
        domains: None,
        splits,
        oos: None,
    })
}

fn read_table(path: &Path) -> Result<Vec<Utterance>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let column = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.contains(&h.trim()))
            .ok_or_else(|| {
                Error::Parse(format!(
                    "{}: missing column {}",
                    path.display(),
                    names.join("/")
                ))
            })
    };
    let text_col = column(&["text", "utterance", "sentence"])?;
    let label_col = column(&["category", "intent", "label"])?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let text = record.get(text_col).unwrap_or_default();
        let label = record.get(label_col).unwrap_or_default();
        out.push(Utterance::seed(text.trim(), label.trim()));
    }
    Ok(out)
}

fn load_table(dir: &Path, hwu_domains: bool) -> Result<IntentDataset> {
    let train = read_table(&dir.join("train.csv"))?;
    let test = read_table(&dir.join("test.csv"))?;
    let val_path = dir.join("val.csv");
    let (train, val) = if val_path.exists() {
        (train, read_table(&val_path)?)
    } else {
        stratified_resplit(train, RESPLIT_VAL_FRACTION, RESPLIT_SEED)
    };
    let splits = Splits { train, val, test };
    let intents = inventory_of(Split::ALL.iter().flat_map(|s| splits.get(*s)));
    // HWU64 intent names are `<scenario>_<intent>`; the scenario is the domain.
    let domains = hwu_domains.then(|| {
        intents
            .iter()
            .map(|i| {
                let domain = i.split('_').next().unwrap_or(i).to_string();
                (i.clone(), domain)
            })
            .collect()
    });
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    IntentDataset::from_parts(DatasetParts {
        name,
        intents,
        domains,
        splits,
        oos: None,
    })
}

/// Moves `round(fraction * count)` examples of each intent (at least one when
/// the intent has two or more) from train to val.
pub fn stratified_resplit(
    train: Vec<Utterance>,
    fraction: f64,
    seed: u64,
) -> (Vec<Utterance>, Vec<Utterance>) {
    let mut by_intent: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, u) in train.iter().enumerate() {
        by_intent.entry(u.intent.clone()).or_default().push(i);
    }
    let mut to_val = HashSet::new();
    for (intent, positions) in &by_intent {
        let count = positions.len();
        let mut take = (fraction * count as f64).round() as usize;
        if take == 0 && count >= 2 {
            take = 1;
        }
        take = take.min(count.saturating_sub(1));
        let mut rng = util::seeded_rng(seed, intent);
        for pick in index::sample(&mut rng, count, take) {
            to_val.insert(positions[pick]);
        }
    }
    let mut new_train = Vec::new();
    let mut val = Vec::new();
    for (i, u) in train.into_iter().enumerate() {
        if to_val.contains(&i) {
            val.push(u);
        } else {
            new_train.push(u);
        }
    }
    (new_train, val)
}

/// Lower median of the per-intent train counts.
pub fn median_target_size(ds: &IntentDataset) -> Result<usize> {
    let mut counts: Vec<usize> = ds.train_counts().into_iter().map(|(_, c)| c).collect();
    if counts.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    counts.sort_unstable();
    let median = counts[(counts.len() - 1) / 2];
    if median == 0 {
        return Err(Error::InvalidPlan("median train count is zero".into()));
    }
    Ok(median)
}

/// Keeps `min(K, available)` seeded-uniform train examples of every few-shot
/// intent. Selected examples keep their original relative order.
pub fn truncate_few_shot(
    ds: &IntentDataset,
    plan: &FewShotPlan,
) -> Result<(IntentDataset, Vec<TruncationWarning>)> {
    plan.validate(ds)?;
    let mut keep = vec![true; ds.train().len()];
    let mut warnings = Vec::new();
    for intent in &plan.few_shot_intents {
        let positions: Vec<usize> = ds
            .train()
            .iter()
            .enumerate()
            .filter(|(_, u)| &u.intent == intent)
            .map(|(i, _)| i)
            .collect();
        if positions.len() < plan.k {
            warn!(
                "intent `{intent}` has {} train examples, fewer than K = {}",
                positions.len(),
                plan.k
            );
            warnings.push(TruncationWarning {
                intent: intent.clone(),
                available: positions.len(),
                k: plan.k,
            });
            continue;
        }
        let mut rng = util::seeded_rng(plan.rng_seed, intent);
        let chosen: HashSet<usize> = index::sample(&mut rng, positions.len(), plan.k)
            .into_iter()
            .collect();
        for (j, &pos) in positions.iter().enumerate() {
            if !chosen.contains(&j) {
                keep[pos] = false;
            }
        }
    }
    let train = ds
        .train()
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(u, _)| u.clone())
        .collect();
    Ok((ds.with_train(train)?, warnings))
}

/// How intents are grouped into partial few-shot runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// One group per domain (CLINC150 style).
    Domain,
    /// One group per intent (SNIPS style).
    Intent,
    /// Domain grouping when the dataset has more than one domain, else per intent.
    Auto,
}

/// The intent groups for partial few-shot runs; `S = groups.len()`.
/// Domains are ordered by name, intents within a group by inventory order.
pub fn partition_groups(ds: &IntentDataset, grouping: Grouping) -> Result<Vec<Vec<String>>> {
    let by_domain = |domains: &BTreeMap<String, String>| {
        let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for intent in ds.intents() {
            let domain = domains.get(intent).map(String::as_str).unwrap_or("");
            groups.entry(domain).or_default().push(intent.clone());
        }
        groups.into_values().collect::<Vec<_>>()
    };
    let per_intent = || ds.intents().iter().map(|i| vec![i.clone()]).collect();
    match grouping {
        Grouping::Domain => ds.domains().map(by_domain).ok_or(Error::MissingDomains),
        Grouping::Intent => Ok(per_intent()),
        Grouping::Auto => match ds.domains() {
            Some(domains) => {
                let groups = by_domain(domains);
                Ok(if groups.len() > 1 { groups } else { per_intent() })
            }
            None => Ok(per_intent()),
        },
    }
}

/// Plan whose few-shot intents are group `group_index`; all others are data-rich.
pub fn partial_split(
    ds: &IntentDataset,
    grouping: Grouping,
    group_index: usize,
    k: usize,
    n: usize,
    rng_seed: u64,
) -> Result<FewShotPlan> {
    let groups = partition_groups(ds, grouping)?;
    let group = groups.get(group_index).ok_or(Error::GroupOutOfRange {
        index: group_index,
        groups: groups.len(),
    })?;
    let few: BTreeSet<String> = group.iter().cloned().collect();
    let rich = ds
        .intents()
        .iter()
        .filter(|i| !few.contains(*i))
        .cloned()
        .collect();
    let plan = FewShotPlan {
        few_shot_intents: few,
        data_rich_intents: rich,
        k,
        n,
        rng_seed,
    };
    plan.validate(ds)?;
    Ok(plan)
}

/// Extends each few-shot intent's train list to exactly N by seeded sampling
/// with replacement from its own examples. Intents already at or above N are
/// left alone.
pub fn upsample(ds: &IntentDataset, plan: &FewShotPlan) -> Result<IntentDataset> {
    plan.validate(ds)?;
    let mut train = ds.train().to_vec();
    for intent in &plan.few_shot_intents {
        let own: Vec<Utterance> = ds.train_for(intent).into_iter().cloned().collect();
        if own.is_empty() {
            return Err(Error::InvalidPlan(format!(
                "few-shot intent `{intent}` has no train examples to upsample"
            )));
        }
        let mut rng = util::seeded_rng(plan.rng_seed ^ 0x5eed_0f_u64, intent);
        for _ in own.len()..plan.n {
            train.push(own.choose(&mut rng).expect("nonempty").clone());
        }
    }
    ds.with_train(train)
}

/// Appends generated utterances to train (OOS-labelled ones to OOS train).
pub fn merge_augmented(ds: &IntentDataset, generated: &[Utterance]) -> Result<IntentDataset> {
    if generated.is_empty() {
        return Ok(ds.clone());
    }
    let mut parts = ds.clone().into_parts();
    for u in generated {
        check_text(u)?;
        if u.is_oos() {
            match parts.oos.as_mut() {
                Some(oos) => oos.get_mut(Split::Train).push(u.clone()),
                None => {
                    return Err(Error::UnknownIntent {
                        intent: u.intent.clone(),
                        context: "dataset has no out-of-scope splits".into(),
                    })
                }
            }
        } else if ds.contains_intent(&u.intent) {
            parts.splits.train.push(u.clone());
        } else {
            return Err(Error::UnknownIntent {
                intent: u.intent.clone(),
                context: "generated utterance".into(),
            });
        }
    }
    IntentDataset::from_parts(parts)
}
