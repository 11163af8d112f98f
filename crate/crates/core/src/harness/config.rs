//! Declarative run configuration and content-addressed run directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    emit_report, run_scenario, temperature_sweep, MetricsReport, PipelineArtifacts, ReportFormat,
    ScenarioOutcome, ScenarioSpec, Workbench,
};
use crate::augment;
use crate::classify::TrainConfig;
use crate::corpus::{self, DatasetFormat};
use crate::eda::SynonymLexicon;
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub path: PathBuf,
    pub format: DatasetFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconSource {
    pub path: PathBuf,
    #[serde(default)]
    pub stopwords: Option<PathBuf>,
}

/// Candidate classifier settings; every learning rate is tried with every
/// L2 weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningGrid {
    pub base: TrainConfig,
    pub learning_rates: Vec<f64>,
    pub l2: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            learning_rates: vec![2.0, 5.0, 10.0],
            l2: vec![1e-4],
        }
    }
}

impl TuningGrid {
    pub fn candidates(&self) -> Vec<TrainConfig> {
        let lrs = if self.learning_rates.is_empty() {
            vec![self.base.learning_rate]
        } else {
            self.learning_rates.clone()
        };
        let l2s = if self.l2.is_empty() { vec![self.base.l2] } else { self.l2.clone() };
        lrs.iter()
            .flat_map(|&learning_rate| {
                l2s.iter().map(move |&l2| TrainConfig {
                    learning_rate,
                    l2,
                    ..self.base
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Name of an lm scenario to rerun at each temperature.
    pub scenario: String,
    pub temperatures: Vec<f64>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_reports() -> Vec<ReportFormat> {
    vec![ReportFormat::TableText, ReportFormat::Csv, ReportFormat::Markdown]
}

/// Everything one `run` needs. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub lexicon: Option<LexiconSource>,
    #[serde(default)]
    pub classifier: TuningGrid,
    #[serde(default = "default_reports")]
    pub reports: Vec<ReportFormat>,
    #[serde(default)]
    pub scenarios: Vec<ScenarioSpec>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let absolute = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        let base = absolute.parent().unwrap_or_else(|| Path::new("/"));
        Self::parse(&util::read_to_string(path)?, base)
            .map_err(|e| e.context(format!("reading {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for s in &self.scenarios {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate scenario name `{}`", s.name)));
            }
        }
        if let Some(sweep) = &self.sweep {
            let target = self
                .scenarios
                .iter()
                .find(|s| s.name == sweep.scenario)
                .ok_or_else(|| Error::Config(format!("sweep scenario `{}` is not defined", sweep.scenario)))?;
            if target.engine_run.is_none() {
                return Err(Error::Config("the sweep scenario must use lm augmentation".into()));
            }
            if sweep.temperatures.is_empty() {
                return Err(Error::Config("sweep needs at least one temperature".into()));
            }
        }
        if self.scenarios.is_empty() && self.sweep.is_none() {
            return Err(Error::Config("nothing to run: no scenarios".into()));
        }
        Ok(())
    }

    /// SHA-256 of the config as written (paths unresolved), so the same file
    /// maps to the same run directory wherever it lives.
    pub fn digest(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Copy with every path made absolute.
    fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.output_dir = self.resolve(&self.output_dir);
        c.dataset.path = self.resolve(&self.dataset.path);
        if let Some(lex) = &mut c.lexicon {
            lex.path = self.resolve(&lex.path);
            lex.stopwords = lex.stopwords.as_ref().map(|p| self.resolve(p));
        }
        for s in &mut c.scenarios {
            if let Some(run) = &mut s.engine_run {
                run.cache_dir = self.resolve(&run.cache_dir);
                run.mock.lexicon = run.mock.lexicon.as_ref().map(|p| self.resolve(p));
                run.mock.stopwords = run.mock.stopwords.as_ref().map(|p| self.resolve(p));
            }
        }
        c
    }

    pub fn run_dir(&self, output_root: Option<&Path>) -> Result<PathBuf> {
        let root = match output_root {
            Some(r) => r.to_path_buf(),
            None => self.resolve(&self.output_dir),
        };
        Ok(root.join(format!("run-{}", &self.digest()?[..16])))
    }
}

/// Result of [`execute`]. Backend call counts live here, not in the run
/// directory, so reruns stay byte-identical.
#[derive(Debug, Clone)]
pub struct ExecutionSummary {
    pub run_dir: PathBuf,
    pub reports: Vec<MetricsReport>,
    pub sweep_fidelity: Vec<(f64, Option<f64>)>,
    pub backend_calls: usize,
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_digest: &'a str,
    artifacts: Vec<ManifestEntry>,
}

/// Collects artifacts in memory and writes them with a manifest at the end.
struct RunWriter {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl RunWriter {
    fn add(&mut self, rel: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((rel.into(), bytes.into()));
    }

    fn add_json<T: Serialize>(&mut self, rel: impl Into<String>, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(rel, text);
        Ok(())
    }

    fn finish(mut self, digest: &str) -> Result<()> {
        if self.dir.exists() {
            // Only ever replace a directory this code wrote.
            if !self.dir.join("manifest.json").exists() {
                return Err(Error::Config(format!(
                    "{} exists and is not a run directory",
                    self.dir.display()
                )));
            }
            fs::remove_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        }
        self.files.sort_by(|a, b| a.0.cmp(&b.0));
        let mut artifacts = Vec::new();
        for (rel, bytes) in &self.files {
            util::write_atomic(&self.dir.join(rel), bytes)?;
            artifacts.push(ManifestEntry {
                path: rel.clone(),
                bytes: bytes.len(),
                sha256: hex::encode(Sha256::digest(bytes)),
            });
        }
        let manifest = Manifest {
            config_digest: digest,
            artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        util::write_atomic(&self.dir.join("manifest.json"), text.as_bytes())
    }
}

fn write_artifacts(w: &mut RunWriter, prefix: &str, outcome: &ScenarioOutcome) -> Result<()> {
    w.add_json(format!("{prefix}/metrics.json"), &outcome.report)?;
    w.add_json(format!("{prefix}/spec.json"), &outcome.spec)?;
    for (r, rep) in outcome.repetitions.iter().enumerate() {
        for (g, run) in rep.runs.iter().enumerate() {
            let PipelineArtifacts {
                generated,
                additions,
                shortfalls,
                filter,
            } = run;
            let base = format!("{prefix}/rep-{r:03}/plan-{g:02}");
            if !generated.is_empty() {
                w.add(format!("{base}/generated.jsonl"), augment::to_jsonl(generated)?);
            }
            if !additions.is_empty() {
                w.add(format!("{base}/additions.jsonl"), augment::to_jsonl(additions)?);
            }
            if !shortfalls.is_empty() {
                w.add_json(format!("{base}/shortfalls.json"), shortfalls)?;
            }
            if let Some(stats) = filter {
                w.add_json(format!("{base}/filter.json"), stats)?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleSummary<'a> {
    meta: &'a crate::classify::TrainingMeta,
    model_sha256: String,
    vocabulary_size: usize,
}

/// Runs every scenario and the optional sweep of `config`, writing all
/// outputs under the config's run directory (or under `output_root`).
pub fn execute(config: &RunConfig, output_root: Option<&Path>) -> Result<ExecutionSummary> {
    config.validate()?;
    let digest = config.digest()?;
    let run_dir = config.run_dir(output_root)?;
    let resolved = config.resolved();

    let dataset = corpus::load_dataset(&resolved.dataset.path, resolved.dataset.format)?;
    let lexicon = match &resolved.lexicon {
        Some(l) => SynonymLexicon::load(&l.path, l.stopwords.as_deref())?,
        None => SynonymLexicon::bundled(),
    };
    log::info!("tuning classifier on `{}`", dataset.name());
    let (wb, tuning) = Workbench::prepare(dataset, &resolved.classifier.candidates(), lexicon)?;

    let mut w = RunWriter {
        dir: run_dir.clone(),
        files: Vec::new(),
    };
    w.add_json("config.json", config)?;
    w.add_json("hyperparameters.json", &tuning)?;
    w.add_json(
        "oracle.json",
        &OracleSummary {
            meta: wb.oracle.meta(),
            model_sha256: hex::encode(Sha256::digest(wb.oracle.to_json()?.as_bytes())),
            vocabulary_size: wb.oracle.vocabulary().len(),
        },
    )?;

    let mut reports = Vec::new();
    let mut backend_calls = 0;
    for spec in &resolved.scenarios {
        log::info!("running scenario `{}`", spec.name);
        let outcome = run_scenario(&wb, spec)?;
        backend_calls += outcome.backend_calls;
        write_artifacts(&mut w, &format!("scenarios/{}", spec.name), &outcome)?;
        reports.push(outcome.report);
    }

    let mut sweep_fidelity = Vec::new();
    if let Some(sweep) = &resolved.sweep {
        let spec = resolved
            .scenarios
            .iter()
            .find(|s| s.name == sweep.scenario)
            .expect("validated");
        for point in temperature_sweep(&wb, spec, &sweep.temperatures)? {
            backend_calls += point.outcome.backend_calls;
            let prefix = format!("sweep/t-{:.2}", point.temperature);
            write_artifacts(&mut w, &prefix, &point.outcome)?;
            w.add_json(format!("{prefix}/fidelity.json"), &point.fidelity)?;
            sweep_fidelity.push((point.temperature, point.fidelity.overall));
            reports.push(point.outcome.report);
        }
    }

    for format in &config.reports {
        let name = match format {
            ReportFormat::TableText => "report.txt",
            ReportFormat::Csv => "report.csv",
            ReportFormat::Markdown => "report.md",
        };
        w.add(name, emit_report(&reports, *format)?);
    }
    w.finish(&digest)?;
    Ok(ExecutionSummary {
        run_dir,
        reports,
        sweep_fidelity,
        backend_calls,
    })
}
