//! Scenario orchestration: truncate, augment, filter, relabel, train,
//! evaluate; repeated over seeds and aggregated.

mod config;
mod metrics;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationJob};
use crate::classify::{self, FidelityReport, IntentClassifier, LinearTextClassifier, TrainConfig};
use crate::corpus::{self, FewShotPlan, Grouping, IntentDataset, Split, Utterance, OOS_LABEL};
use crate::eda::{self, EdaConfig, SynonymLexicon};
use crate::error::{Error, Result};
use crate::filter::{self, FilterConfig, FilterStats, LmVerdicts, OracleVerdicts, VerdictSource};
use crate::lm::{BackendKind, EngineRun, LmClient};
use crate::prompting::{PromptStyle, PromptTemplate};

pub use config::{execute, ExecutionSummary, RunConfig, SweepConfig, TuningGrid};
pub use metrics::{
    format_cell, inscope_accuracy, oos_recall, Aggregate, MetricsReport, RepetitionMetrics,
};
pub use report::{emit_report, parse_csv_report, CsvRow, ReportFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    FullFewShot,
    PartialFewShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Upsample,
    Eda,
    Lm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub setup: Setup,
    /// Intent groups of the partial setup.
    pub grouping: Grouping,
    pub augmentation: Augmentation,
    pub relabel: bool,
    pub filter: bool,
    pub engine_run: Option<EngineRun>,
    pub prompt_style: PromptStyle,
    pub k: usize,
    /// Target per few-shot intent; the dataset's median train count when absent.
    pub n: Option<usize>,
    pub repetitions: usize,
    pub base_seed: u64,
    pub eda: EdaConfig,
    pub filter_config: FilterConfig,
    pub max_rounds: u32,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            name: "baseline".into(),
            setup: Setup::FullFewShot,
            grouping: Grouping::Auto,
            augmentation: Augmentation::None,
            relabel: false,
            filter: false,
            engine_run: None,
            prompt_style: PromptStyle::SingleIntent,
            k: 10,
            n: None,
            repetitions: 10,
            base_seed: 0,
            eda: EdaConfig::default(),
            filter_config: FilterConfig::default(),
            max_rounds: augment::DEFAULT_MAX_ROUNDS,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("scenario `{}`: {m}", self.name)));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        {
            return fail("names may only use ASCII letters, digits, `_`, `-` and `.`".into());
        }
        if self.repetitions == 0 {
            return fail("repetitions must be positive".into());
        }
        if self.k == 0 || self.n.is_some_and(|n| n < self.k) {
            return fail(format!("need 0 < K <= N, got K = {} and N = {:?}", self.k, self.n));
        }
        if (self.relabel || self.filter) && self.augmentation == Augmentation::None {
            return fail("relabel and filter need an augmentation".into());
        }
        if (self.augmentation == Augmentation::Lm) != self.engine_run.is_some() {
            return fail("engine_run is required exactly when augmentation = lm".into());
        }
        if self.prompt_style == PromptStyle::ClassifyTriplet {
            return fail("classify_triplet is not a generation style".into());
        }
        if let Some(run) = &self.engine_run {
            run.validate()?;
        }
        self.eda.validate()
    }

    pub fn seed_for(&self, repetition: usize) -> u64 {
        self.base_seed + repetition as u64
    }
}

/// Dataset, frozen classifier settings and oracle shared by all scenarios.
pub struct Workbench {
    pub dataset: IntentDataset,
    pub train_config: TrainConfig,
    pub oracle: LinearTextClassifier,
    /// Lexicon for EDA.
    pub lexicon: SynonymLexicon,
}

/// Validation accuracy of one candidate training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub config: TrainConfig,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

/// The dataset's classes, with the out-of-scope label last when present.
pub fn classes_of(ds: &IntentDataset) -> Vec<String> {
    let mut classes = ds.intents().to_vec();
    if ds.has_oos() {
        classes.push(OOS_LABEL.to_string());
    }
    classes
}

/// Trains on the full training data with every candidate and keeps the one
/// with the best validation accuracy (lower loss, then earlier candidate on
/// ties). The winning model is the oracle.
pub fn tune_and_train_oracle(
    ds: &IntentDataset,
    candidates: &[TrainConfig],
) -> Result<(LinearTextClassifier, Vec<TuningResult>)> {
    if candidates.is_empty() {
        return Err(Error::Config("no training configurations to tune over".into()));
    }
    let classes = classes_of(ds);
    let train = ds.with_oos(Split::Train);
    let val = ds.with_oos(Split::Val);
    let models = candidates
        .par_iter()
        .map(|cfg| LinearTextClassifier::train(&classes, &train, &val, cfg))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<TuningResult> = models
        .iter()
        .map(|m| TuningResult {
            config: m.meta().config,
            val_accuracy: m.meta().best_val_accuracy,
            val_loss: m.meta().best_val_loss,
        })
        .collect();
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        let b = &results[best];
        if r.val_accuracy > b.val_accuracy || (r.val_accuracy == b.val_accuracy && r.val_loss < b.val_loss) {
            best = i;
        }
    }
    let oracle = models.into_iter().nth(best).expect("best index in range");
    Ok((oracle, results))
}

impl Workbench {
    pub fn prepare(dataset: IntentDataset, candidates: &[TrainConfig], lexicon: SynonymLexicon) -> Result<(Self, Vec<TuningResult>)> {
        let (oracle, tuning) = tune_and_train_oracle(&dataset, candidates)?;
        let train_config = oracle.meta().config;
        Ok((
            Self {
                dataset,
                train_config,
                oracle,
                lexicon,
            },
            tuning,
        ))
    }

    pub fn classes(&self) -> Vec<String> {
        classes_of(&self.dataset)
    }

    pub fn lm_client(&self, run: &EngineRun) -> Result<LmClient> {
        lm_client_for(&self.dataset, run)
    }
}

/// A generation client for `run`. Mock backends may drift towards any
/// intent's full training examples.
pub fn lm_client_for(ds: &IntentDataset, run: &EngineRun) -> Result<LmClient> {
    match run.backend {
        BackendKind::Mock => {
            let mut context: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for u in ds.train() {
                context.entry(u.intent.clone()).or_default().push(u.text.clone());
            }
            LmClient::mock_with_context(run.clone(), context)
        }
        BackendKind::Remote => LmClient::new(run.clone()),
    }
}

/// What one pipeline pass produced besides its metrics.
#[derive(Debug, Clone, Default)]
pub struct PipelineArtifacts {
    /// Raw generations, annotated with filter verdicts when filtering ran.
    pub generated: Vec<Utterance>,
    /// The utterances merged into the training data.
    pub additions: Vec<Utterance>,
    pub shortfalls: Vec<augment::Shortfall>,
    pub filter: Option<FilterStats>,
}

#[derive(Debug, Clone)]
pub struct RepetitionOutcome {
    pub metrics: RepetitionMetrics,
    /// One entry per plan (one for the full setup, S for the partial one).
    pub runs: Vec<PipelineArtifacts>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub spec: ScenarioSpec,
    pub report: MetricsReport,
    pub repetitions: Vec<RepetitionOutcome>,
    pub backend_calls: usize,
}

impl ScenarioOutcome {
    /// Oracle agreement over every raw generation of every repetition.
    pub fn pooled_fidelity(&self, oracle: &dyn IntentClassifier) -> Result<FidelityReport> {
        let all: Vec<Utterance> = self
            .repetitions
            .iter()
            .flat_map(|r| r.runs.iter().flat_map(|a| a.generated.iter().cloned()))
            .collect();
        classify::fidelity(oracle, &all)
    }
}

fn plans_for(wb: &Workbench, spec: &ScenarioSpec, seed: u64) -> Result<Vec<FewShotPlan>> {
    let ds = &wb.dataset;
    let n = match spec.n {
        Some(n) => n,
        None => corpus::median_target_size(ds)?,
    };
    match spec.setup {
        Setup::FullFewShot => Ok(vec![FewShotPlan::full(ds, spec.k, n, seed)?]),
        Setup::PartialFewShot => {
            let groups = corpus::partition_groups(ds, spec.grouping)?.len();
            (0..groups)
                .map(|g| corpus::partial_split(ds, spec.grouping, g, spec.k, n, seed))
                .collect()
        }
    }
}

/// Groups for every seed intent that has at least one in-inventory
/// confusion, as large as `group_size` allows. Members contribute at most
/// `k` seeds each.
pub fn close_intent_groups(
    truncated: &IntentDataset,
    oracle: &dyn IntentClassifier,
    generated: &[Utterance],
    cfg: &FilterConfig,
    k: usize,
) -> Result<BTreeMap<String, filter::CloseIntentGroup>> {
    let texts: Vec<&str> = generated.iter().map(|u| u.text.as_str()).collect();
    let predictions = oracle.predict_all(&texts)?;
    let confusion = FidelityReport::from_pairs(
        generated
            .iter()
            .zip(&predictions)
            .map(|(u, p)| (classify::seed_intent_of(u), p.intent.as_str())),
    );
    let seeds: BTreeSet<&str> = generated.iter().map(classify::seed_intent_of).collect();
    let mut groups = BTreeMap::new();
    for seed in seeds {
        for size in (2..=cfg.group_size.max(2)).rev() {
            if let Ok(mut group) = filter::select_close_intents(truncated, &confusion, seed, size) {
                // Data-rich members contribute only K seeds to the prompt.
                for s in group.seeds_per_intent.values_mut() {
                    s.truncate(k);
                }
                groups.insert(seed.to_string(), group);
                break;
            }
        }
    }
    Ok(groups)
}

/// One pass: truncate, augment, filter, relabel, train, evaluate.
pub fn run_pipeline(
    wb: &Workbench,
    spec: &ScenarioSpec,
    plan: &FewShotPlan,
    client: Option<&LmClient>,
) -> Result<(RepetitionMetrics, PipelineArtifacts)> {
    let ds = &wb.dataset;
    let (truncated, _) = corpus::truncate_few_shot(ds, plan)?;
    let mut art = PipelineArtifacts::default();
    let base = match spec.augmentation {
        Augmentation::None => truncated.clone(),
        Augmentation::Upsample => corpus::upsample(&truncated, plan)?,
        Augmentation::Eda => {
            let cfg = EdaConfig {
                rng_seed: plan.rng_seed,
                ..spec.eda
            };
            for intent in &plan.few_shot_intents {
                let seeds: Vec<Utterance> = truncated.train_for(intent).into_iter().cloned().collect();
                art.generated.extend(eda::eda_for_intent(
                    &seeds,
                    plan.per_intent_target(),
                    &cfg,
                    &wb.lexicon,
                ));
            }
            truncated.clone()
        }
        Augmentation::Lm => {
            let client = client.ok_or_else(|| Error::Config("lm augmentation without a client".into()))?;
            let job = AugmentationJob {
                max_rounds: spec.max_rounds,
                ..AugmentationJob::new(plan.clone(), PromptTemplate::default_for(spec.prompt_style))
            };
            let outcome = augment::augment_dataset(client, &truncated, &job)?;
            art.generated = outcome.generated;
            art.shortfalls = outcome.shortfalls;
            truncated.clone()
        }
    };

    let fidelity = if art.generated.is_empty() {
        None
    } else {
        classify::fidelity(&wb.oracle, &art.generated)?.overall
    };

    let mut additions = art.generated.clone();
    if spec.filter && !additions.is_empty() {
        let groups = close_intent_groups(&truncated, &wb.oracle, &additions, &spec.filter_config, spec.k)?;
        let (judged, passed): (Vec<Utterance>, Vec<Utterance>) = additions
            .into_iter()
            .partition(|u| groups.contains_key(classify::seed_intent_of(u)));
        let lm_source;
        let oracle_source = OracleVerdicts(&wb.oracle);
        let source: &dyn VerdictSource = match client {
            Some(c) => {
                lm_source = LmVerdicts::new(c, &spec.filter_config)?;
                &lm_source
            }
            None => &oracle_source,
        };
        let outcome = filter::filter_generated(source, &groups, &judged, Some(&wb.oracle))?;
        let mut stats = outcome.stats;
        // Utterances without a group pass unjudged.
        stats.input += passed.len();
        stats.kept += passed.len();
        let mut annotated = outcome.kept.clone();
        annotated.extend(outcome.rejected);
        annotated.extend(passed.iter().cloned());
        art.generated = annotated;
        additions = outcome.kept;
        additions.extend(passed);
        art.filter = Some(stats);
    }
    if spec.relabel {
        additions = classify::relabel(&wb.oracle, &additions)?;
    }
    let merged = corpus::merge_augmented(&base, &additions)?;
    art.additions = additions;

    let classes = wb.classes();
    let clf = LinearTextClassifier::train(
        &classes,
        &merged.with_oos(Split::Train),
        &ds.with_oos(Split::Val),
        &wb.train_config,
    )?;
    let test = ds.with_oos(Split::Test);
    let texts: Vec<&str> = test.iter().map(|u| u.text.as_str()).collect();
    let pairs: Vec<(String, String)> = test
        .iter()
        .zip(classify::predict_parallel(&clf, &texts))
        .map(|(u, p)| (u.intent.clone(), p.intent))
        .collect();
    let few_shot_pairs: Vec<(String, String)> = pairs
        .iter()
        .filter(|(gold, _)| plan.few_shot_intents.contains(gold))
        .cloned()
        .collect();
    let metrics = RepetitionMetrics {
        seed: plan.rng_seed,
        inscope_accuracy: inscope_accuracy(&pairs, OOS_LABEL)?,
        oos_recall: if ds.has_oos() {
            Some(oos_recall(&pairs, OOS_LABEL)?)
        } else {
            None
        },
        few_shot_accuracy: inscope_accuracy(&few_shot_pairs, OOS_LABEL).ok(),
        fidelity,
    };
    Ok((metrics, art))
}

/// Runs every repetition of `spec` (in parallel) and aggregates. Partial
/// setups average their S sub-runs within each repetition first.
pub fn run_scenario(wb: &Workbench, spec: &ScenarioSpec) -> Result<ScenarioOutcome> {
    spec.validate()?;
    let client = match &spec.engine_run {
        Some(run) => {
            let template = PromptTemplate::default_for(spec.prompt_style);
            let run = EngineRun {
                stop_sequence: template.stop_sequence.clone(),
                ..run.clone()
            };
            Some(wb.lm_client(&run)?)
        }
        None => None,
    };
    let repetitions = (0..spec.repetitions)
        .into_par_iter()
        .map(|r| {
            let seed = spec.seed_for(r);
            let plans = plans_for(wb, spec, seed)?;
            let mut metrics = Vec::with_capacity(plans.len());
            let mut runs = Vec::with_capacity(plans.len());
            for plan in &plans {
                let (m, a) = run_pipeline(wb, spec, plan, client.as_ref())?;
                metrics.push(m);
                runs.push(a);
            }
            Ok(RepetitionOutcome {
                metrics: RepetitionMetrics::average(seed, &metrics)?,
                runs,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.context(format!("scenario `{}`", spec.name)))?;
    let report = MetricsReport::from_repetitions(
        spec.name.clone(),
        repetitions.iter().map(|r| r.metrics.clone()).collect(),
    )?;
    Ok(ScenarioOutcome {
        spec: spec.clone(),
        report,
        backend_calls: client.as_ref().map_or(0, LmClient::backend_calls),
        repetitions,
    })
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub temperature: f64,
    pub outcome: ScenarioOutcome,
    pub fidelity: FidelityReport,
}

/// One full scenario run per temperature plus the pooled fidelity of that
/// temperature's generations.
pub fn temperature_sweep(wb: &Workbench, spec: &ScenarioSpec, temperatures: &[f64]) -> Result<Vec<SweepPoint>> {
    if temperatures.is_empty() {
        return Err(Error::Config("temperature sweep needs at least one temperature".into()));
    }
    let run = match (&spec.engine_run, spec.augmentation) {
        (Some(run), Augmentation::Lm) => run,
        _ => return Err(Error::Config("temperature sweep needs augmentation = lm".into())),
    };
    temperatures
        .iter()
        .map(|&t| {
            let spec = ScenarioSpec {
                name: format!("{}-t{t:.2}", spec.name),
                engine_run: Some(run.with_temperature(t)),
                ..spec.clone()
            };
            let outcome = run_scenario(wb, &spec)?;
            let fidelity = outcome.pooled_fidelity(&wb.oracle)?;
            Ok(SweepPoint {
                temperature: t,
                outcome,
                fidelity,
            })
        })
        .collect()
}
