use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use intent_augment::augment::{self, AugmentationJob};
use intent_augment::classify::{self, LinearTextClassifier};
use intent_augment::corpus::{self, DatasetFormat, FewShotPlan, IntentDataset};
use intent_augment::eda::{self, EdaConfig, SynonymLexicon};
use intent_augment::filter::{self, FilterConfig, LmVerdicts, OracleVerdicts, VerdictSource};
use intent_augment::harness::{self, ReportFormat, RunConfig, SweepConfig, TuningGrid};
use intent_augment::lm::EngineRun;
use intent_augment::prompting::{PromptStyle, PromptTemplate};
use intent_augment::review::{self, JudgmentLog};
use intent_augment::util;

#[derive(Parser)]
#[command(name = "intent-augment", version, about = "Few-shot intent data augmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct PlanArgs {
    /// Seed examples kept per few-shot intent.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Target examples per few-shot intent (default: median train count).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct EngineArgs {
    /// TOML file with engine settings; the mock backend when absent.
    #[arg(long)]
    engine: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Response cache directory (overrides the engine file).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl EngineArgs {
    fn load(&self) -> Result<EngineRun> {
        let mut run = match &self.engine {
            Some(path) => {
                let text = util::read_to_string(path)?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => EngineRun::default(),
        };
        if let Some(t) = self.temperature {
            run.temperature = t;
        }
        if let Some(dir) = &self.cache_dir {
            run.cache_dir = dir.clone();
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    SingleIntent,
    Gpt3mix,
    Gpt3mixMixed,
}

impl From<Style> for PromptStyle {
    fn from(s: Style) -> Self {
        match s {
            Style::SingleIntent => PromptStyle::SingleIntent,
            Style::Gpt3mix => PromptStyle::Gpt3Mix,
            Style::Gpt3mixMixed => PromptStyle::Gpt3MixMixed,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ReviewMode {
    Relabel,
    SpotFake,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Verdicts {
    Lm,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a dataset to the native JSON format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// clinc_json, hwu_table, banking_table, snips_json or native.
        #[arg(long)]
        format: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Truncate to K shots and generate N - K utterances per intent.
    Generate {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, value_enum, default_value = "single-intent")]
        style: Style,
        /// Custom prompt template file (key = value lines).
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = augment::DEFAULT_MAX_ROUNDS)]
        max_rounds: u32,
        #[arg(long)]
        out: PathBuf,
        /// Also write the truncated dataset.
        #[arg(long)]
        truncated_out: Option<PathBuf>,
    },
    /// Rule-based augmentation of the K-shot data.
    Eda {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full-data oracle classifier.
    TrainOracle {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Learning rates to tune over.
        #[arg(long, value_delimiter = ',')]
        learning_rates: Vec<f64>,
    },
    /// Reject generated utterances judged to belong to a close intent.
    Filter {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, value_enum, default_value = "lm")]
        verdicts: Verdicts,
        #[arg(long, default_value_t = filter::DEFAULT_VOTES)]
        votes: usize,
        #[arg(long, default_value_t = filter::DEFAULT_TEMPERATURE)]
        filter_temperature: f64,
        #[arg(long, default_value_t = 3)]
        group_size: usize,
        #[arg(long)]
        kept_out: PathBuf,
        #[arg(long)]
        rejected_out: Option<PathBuf>,
    },
    /// Replace generated labels with the oracle's predictions.
    Relabel {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a run configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Root for the run directory instead of the configured output_dir.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rerun one lm scenario of a configuration at several temperatures.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenario: String,
        #[arg(long, value_delimiter = ',', required = true)]
        temperatures: Vec<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render metrics.json files (or every metrics file in a run directory).
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// table_text, csv or markdown.
        #[arg(long, default_value = "table_text")]
        format: String,
    },
    /// Serve review tasks over HTTP.
    Serve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, value_enum, default_value = "relabel")]
        mode: ReviewMode,
        /// Oracle used to propose alternative intents for relabel tasks.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, default_value = "judgments.jsonl")]
        log: PathBuf,
        #[arg(long)]
        tasks_out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        tasks_per_intent: usize,
        #[arg(long, default_value_t = review::DEFAULT_REPLACE_PROBABILITY)]
        replace_probability: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn load_native(path: &Path) -> Result<IntentDataset> {
    Ok(corpus::load_dataset(path, DatasetFormat::Native)?)
}

fn load_generated(path: &Path) -> Result<Vec<intent_augment::corpus::Utterance>> {
    Ok(augment::from_jsonl(&util::read_to_string(path)?)?)
}

fn full_plan(ds: &IntentDataset, args: &PlanArgs) -> Result<FewShotPlan> {
    let n = match args.n {
        Some(n) => n,
        None => corpus::median_target_size(ds)?,
    };
    Ok(FewShotPlan::full(ds, args.k, n, args.seed)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    util::write_atomic(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn collect_metrics(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() {
                collect_metrics(&e, out)?;
            } else if e.file_name().is_some_and(|n| n == "metrics.json") {
                out.push(e);
            }
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest { input, format, output } => {
            let ds = corpus::load_dataset(&input, format.parse()?)?;
            corpus::save_native(&ds, &output)?;
            println!(
                "{}: {} intents, {}/{}/{} train/val/test{}",
                ds.name(),
                ds.intents().len(),
                ds.train().len(),
                ds.val().len(),
                ds.test().len(),
                if ds.has_oos() { ", with out-of-scope splits" } else { "" }
            );
        }
        Command::Generate {
            dataset,
            plan,
            engine,
            style,
            template,
            max_rounds,
            out,
            truncated_out,
        } => {
            let ds = load_native(&dataset)?;
            let plan = full_plan(&ds, &plan)?;
            let (truncated, _) = corpus::truncate_few_shot(&ds, &plan)?;
            let template = match template {
                Some(p) => PromptTemplate::load(&p)?,
                None => PromptTemplate::default_for(style.into()),
            };
            let run = EngineRun {
                stop_sequence: template.stop_sequence.clone(),
                ..engine.load()?
            };
            let client = harness::lm_client_for(&ds, &run)?;
            let job = AugmentationJob {
                max_rounds,
                ..AugmentationJob::new(plan, template)
            };
            let outcome = augment::augment_dataset(&client, &truncated, &job)?;
            write(&out, &augment::to_jsonl(&outcome.generated)?)?;
            if let Some(path) = truncated_out {
                corpus::save_native(&truncated, &path)?;
            }
            for s in &outcome.shortfalls {
                eprintln!("shortfall: {}", s.to_error());
            }
            println!(
                "generated {} utterances with {} backend calls",
                outcome.generated.len(),
                client.backend_calls()
            );
        }
        Command::Eda {
            dataset,
            plan,
            lexicon,
            stopwords,
            out,
        } => {
            let ds = load_native(&dataset)?;
            let plan = full_plan(&ds, &plan)?;
            let (truncated, _) = corpus::truncate_few_shot(&ds, &plan)?;
            let lex = match lexicon {
                Some(p) => SynonymLexicon::load(&p, stopwords.as_deref())?,
                None => SynonymLexicon::bundled(),
            };
            let cfg = EdaConfig {
                rng_seed: plan.rng_seed,
                ..EdaConfig::default()
            };
            let mut generated = Vec::new();
            for intent in &plan.few_shot_intents {
                let seeds: Vec<_> = truncated.train_for(intent).into_iter().cloned().collect();
                generated.extend(eda::eda_for_intent(&seeds, plan.per_intent_target(), &cfg, &lex));
            }
            write(&out, &augment::to_jsonl(&generated)?)?;
            println!("generated {} utterances", generated.len());
        }
        Command::TrainOracle {
            dataset,
            out,
            learning_rates,
        } => {
            let ds = load_native(&dataset)?;
            let grid = TuningGrid {
                learning_rates: if learning_rates.is_empty() {
                    TuningGrid::default().learning_rates
                } else {
                    learning_rates
                },
                ..TuningGrid::default()
            };
            let (oracle, tuning) = harness::tune_and_train_oracle(&ds, &grid.candidates())?;
            oracle.save(&out)?;
            for t in &tuning {
                println!(
                    "lr {:>6} l2 {:>8}: val accuracy {:.4}",
                    t.config.learning_rate, t.config.l2, t.val_accuracy
                );
            }
            println!(
                "oracle: val accuracy {:.4} (epoch {})",
                oracle.meta().best_val_accuracy,
                oracle.meta().best_epoch
            );
        }
        Command::Filter {
            dataset,
            generated,
            oracle,
            plan,
            engine,
            verdicts,
            votes,
            filter_temperature,
            group_size,
            kept_out,
            rejected_out,
        } => {
            let ds = load_native(&dataset)?;
            let plan = full_plan(&ds, &plan)?;
            let (truncated, _) = corpus::truncate_few_shot(&ds, &plan)?;
            let generated = load_generated(&generated)?;
            let oracle = LinearTextClassifier::load(&oracle)?;
            let cfg = FilterConfig {
                votes,
                temperature: filter_temperature,
                group_size,
            };
            let groups = harness::close_intent_groups(&truncated, &oracle, &generated, &cfg, plan.k)?;
            let (judged, passed): (Vec<_>, Vec<_>) = generated
                .into_iter()
                .partition(|u| groups.contains_key(classify::seed_intent_of(u)));
            let lm;
            let oracle_source = OracleVerdicts(&oracle);
            let source: &dyn VerdictSource = match verdicts {
                Verdicts::Lm => {
                    let client = harness::lm_client_for(&ds, &engine.load()?)?;
                    lm = LmVerdicts::new(&client, &cfg)?;
                    &lm
                }
                Verdicts::Oracle => &oracle_source,
            };
            let outcome = filter::filter_generated(source, &groups, &judged, Some(&oracle))?;
            let mut kept = outcome.kept;
            kept.extend(passed.iter().cloned());
            write(&kept_out, &augment::to_jsonl(&kept)?)?;
            if let Some(path) = rejected_out {
                write(&path, &augment::to_jsonl(&outcome.rejected)?)?;
            }
            let pct = |f: Option<f64>| f.map_or("-".to_string(), |v| format!("{:.2}%", v * 100.0));
            println!(
                "kept {} of {} ({} without a close-intent group); fidelity {} -> {}",
                kept.len(),
                judged.len() + passed.len(),
                passed.len(),
                pct(outcome.stats.fidelity_before),
                pct(outcome.stats.fidelity_after)
            );
        }
        Command::Relabel { generated, oracle, out } => {
            let generated = load_generated(&generated)?;
            let oracle = LinearTextClassifier::load(&oracle)?;
            let before = classify::fidelity(&oracle, &generated)?;
            let relabelled = classify::relabel(&oracle, &generated)?;
            write(&out, &augment::to_jsonl(&relabelled)?)?;
            println!(
                "relabelled {} utterances; {} labels changed",
                relabelled.len(),
                before.total - before.matching
            );
        }
        Command::Run { config, output } => {
            let cfg = RunConfig::load(&config)?;
            let summary = harness::execute(&cfg, output.as_deref())?;
            print!("{}", harness::emit_report(&summary.reports, ReportFormat::TableText)?);
            println!("run directory: {}", summary.run_dir.display());
            println!("backend calls: {}", summary.backend_calls);
        }
        Command::Sweep {
            config,
            scenario,
            temperatures,
            output,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.scenarios.retain(|s| s.name == scenario);
            if cfg.scenarios.is_empty() {
                bail!("scenario `{scenario}` is not defined in {}", config.display());
            }
            cfg.sweep = Some(SweepConfig {
                scenario,
                temperatures,
            });
            cfg.validate()?;
            let summary = harness::execute(&cfg, output.as_deref())?;
            print!("{}", harness::emit_report(&summary.reports, ReportFormat::TableText)?);
            for (t, f) in &summary.sweep_fidelity {
                let f = f.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
                println!("temperature {t:.2}: fidelity {f}");
            }
            println!("run directory: {}", summary.run_dir.display());
        }
        Command::Report { inputs, format } => {
            let mut files = Vec::new();
            for input in &inputs {
                collect_metrics(input, &mut files)?;
            }
            let reports = files
                .iter()
                .map(|f| -> Result<harness::MetricsReport> {
                    Ok(serde_json::from_str(&util::read_to_string(f)?)
                        .with_context(|| format!("parsing {}", f.display()))?)
                })
                .collect::<Result<Vec<_>>>()?;
            print!("{}", harness::emit_report(&reports, format.parse()?)?);
        }
        Command::Serve {
            dataset,
            generated,
            mode,
            oracle,
            log,
            tasks_out,
            tasks_per_intent,
            replace_probability,
            seed,
            static_dir,
            addr,
        } => {
            let ds = load_native(&dataset)?;
            let generated = load_generated(&generated)?;
            let tasks = match mode {
                ReviewMode::Relabel => {
                    let confusion = match oracle {
                        Some(p) => classify::fidelity(&LinearTextClassifier::load(&p)?, &generated)?,
                        None => Default::default(),
                    };
                    review::build_relabel_tasks(&generated, &confusion)
                }
                ReviewMode::SpotFake => review::build_spot_fake_tasks(
                    &ds,
                    &generated,
                    replace_probability,
                    tasks_per_intent,
                    seed,
                )?,
            };
            if let Some(path) = tasks_out {
                review::save_tasks(&tasks, &path)?;
            }
            let log = JudgmentLog::open(&log)?;
            let state = intent_augment_review::ReviewState::new(tasks, generated, log, static_dir)?;
            tokio::runtime::Runtime::new()?.block_on(intent_augment_review::serve(addr, state))?;
        }
    }
    Ok(())
}
