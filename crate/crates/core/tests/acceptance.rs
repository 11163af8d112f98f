//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Run with `cargo test -p intent-augment --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use intent_augment::classify::{self, fidelity_ratio, IntentClassifier, LinearTextClassifier, TrainConfig};
use intent_augment::corpus::{self, FewShotPlan, Origin, Split, Utterance};
use intent_augment::eda::{self, EdaConfig, EdaOp, SynonymLexicon};
use intent_augment::filter::{self, CloseIntentGroup, FilterConfig, LmVerdicts, OracleVerdicts};
use intent_augment::harness::{
    self, format_cell, oos_recall, Augmentation, RunConfig, ScenarioSpec, TuningGrid, Workbench,
};
use intent_augment::lm::EngineRun;
use intent_augment::synthetic::{SyntheticCorpus, SyntheticSpec};
use intent_augment::util;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Fixture {
    dir: tempfile::TempDir,
    corpus: SyntheticCorpus,
    wb: Workbench,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = SyntheticCorpus::generate(&SyntheticSpec::default()).unwrap();
        corpus.write_to(dir.path()).unwrap();
        let (wb, _) = Workbench::prepare(
            corpus.dataset.clone(),
            &TuningGrid::default().candidates(),
            corpus.lexicon.clone(),
        )
        .unwrap();
        Self { dir, corpus, wb }
    }

    fn run(&self, p_noise: f64) -> EngineRun {
        let mut run = EngineRun::mock(self.dir.path().join("cache"));
        run.mock.p_noise = p_noise;
        run.mock.lexicon = Some(self.dir.path().join("lexicon.tsv"));
        run.mock.stopwords = Some(self.dir.path().join("stopwords.txt"));
        run
    }

    fn spec(&self, name: &str, augmentation: Augmentation, p_noise: f64) -> ScenarioSpec {
        ScenarioSpec {
            name: name.into(),
            augmentation,
            engine_run: (augmentation == Augmentation::Lm).then(|| self.run(p_noise)),
            k: 10,
            n: Some(50),
            repetitions: 10,
            ..ScenarioSpec::default()
        }
    }
}

fn fidelity_arithmetic() -> Check {
    let pct = |m, t| fidelity_ratio(m, t).unwrap() * 100.0;
    let (a, b) = (pct(282, 468), pct(269, 371));
    ensure((a - 60.26).abs() <= 0.01, format!("282/468 = {a}"))?;
    ensure((b - 72.51).abs() <= 0.01, format!("269/371 = {b}"))?;
    Ok(format!("282/468 = {a:.2}%, 269/371 = {b:.2}%"))
}

fn oos_recall_arithmetic() -> Check {
    let mut pairs = vec![("oos".to_string(), "oos".to_string()); 429];
    pairs.extend(vec![("oos".to_string(), "x".to_string()); 571]);
    let r = oos_recall(&pairs, "oos").map_err(err)? * 100.0;
    ensure(r == 42.9, format!("429/1000 = {r}"))?;
    Ok(format!("429/1000 = {r}%"))
}

fn cell_format() -> Check {
    let cell = format_cell(94.07, 0.18);
    ensure(cell == "94.07 (0.18)", cell.clone())?;
    let agg = harness::Aggregate { mean: 0.9407, std: 0.0018 };
    ensure(agg.cell() == "94.07 (0.18)", agg.cell())?;
    Ok(cell)
}

fn end_to_end(f: &Fixture, started: Instant) -> Check {
    let baseline = harness::run_scenario(&f.wb, &f.spec("baseline", Augmentation::None, 0.2)).map_err(err)?;
    let augmented = harness::run_scenario(&f.wb, &f.spec("augmented", Augmentation::Lm, 0.2)).map_err(err)?;
    let eda = harness::run_scenario(&f.wb, &f.spec("eda", Augmentation::Eda, 0.2)).map_err(err)?;
    let elapsed = started.elapsed().as_secs_f64();
    let (b, a) = (baseline.report.inscope_accuracy, augmented.report.inscope_accuracy);
    ensure(baseline.report.repetitions.len() == 10, "baseline repetitions")?;
    ensure(baseline.backend_calls == 0, "baseline called the backend")?;
    ensure(a.mean >= b.mean, format!("augmented {} < baseline {}", a.cell(), b.cell()))?;
    ensure(eda.report.repetitions.len() == 10, "eda did not complete")?;
    ensure(elapsed < 120.0, format!("took {elapsed:.1}s"))?;
    Ok(format!(
        "baseline {}, augmented {}, eda {}, {elapsed:.1}s including oracle tuning",
        b.cell(),
        a.cell(),
        eda.report.inscope_accuracy.cell()
    ))
}

fn relabel_beats_augmented(f: &Fixture) -> Check {
    let mut details = Vec::new();
    for p in [0.3, 0.5] {
        let aug = harness::run_scenario(&f.wb, &f.spec("aug", Augmentation::Lm, p)).map_err(err)?;
        let rel = harness::run_scenario(
            &f.wb,
            &ScenarioSpec {
                relabel: true,
                ..f.spec("relabelled", Augmentation::Lm, p)
            },
        )
        .map_err(err)?;
        let (a, r) = (aug.report.inscope_accuracy, rel.report.inscope_accuracy);
        ensure(r.mean >= a.mean, format!("p_noise {p}: relabelled {} < augmented {}", r.cell(), a.cell()))?;
        let wins = aug
            .report
            .repetitions
            .iter()
            .zip(&rel.report.repetitions)
            .filter(|(x, y)| y.inscope_accuracy >= x.inscope_accuracy)
            .count();
        details.push(format!("p_noise {p}: {} vs {} ({wins}/10 seeds)", r.cell(), a.cell()));
    }
    Ok(details.join("; "))
}

fn filtering(f: &Fixture) -> Check {
    let ds = &f.wb.dataset;
    let plan = FewShotPlan::full(ds, 10, 50, 3).map_err(err)?;
    let (truncated, _) = corpus::truncate_few_shot(ds, &plan).map_err(err)?;
    let client = harness::lm_client_for(ds, &f.run(0.3)).map_err(err)?;
    let job = intent_augment::augment::AugmentationJob::new(
        plan.clone(),
        intent_augment::prompting::PromptTemplate::single_intent(),
    );
    let generated = intent_augment::augment::augment_dataset(&client, &truncated, &job)
        .map_err(err)?
        .generated;

    // Oracle verdicts, every intent grouped with its domain siblings.
    let domains = ds.domains().unwrap();
    let mut groups = BTreeMap::new();
    for intent in ds.intents() {
        let mut members = vec![intent.clone()];
        members.extend(
            ds.intents()
                .iter()
                .filter(|o| *o != intent && domains[*o] == domains[intent])
                .cloned(),
        );
        groups.insert(intent.clone(), CloseIntentGroup::manual(&truncated, &members).map_err(err)?);
    }
    let oracle_run = filter::filter_generated(&OracleVerdicts(&f.wb.oracle), &groups, &generated, Some(&f.wb.oracle))
        .map_err(err)?;
    let after = oracle_run.stats.fidelity_after;
    ensure(after == Some(1.0), format!("oracle verdicts gave post-filter fidelity {after:?}"))?;
    ensure(
        oracle_run.kept.len() + oracle_run.rejected.len() == generated.len(),
        "kept and rejected do not partition the input",
    )?;

    // Seeded LM verdicts over oracle-confusion triplets.
    let cfg = FilterConfig::default();
    let groups = harness::close_intent_groups(&truncated, &f.wb.oracle, &generated, &cfg, plan.k).map_err(err)?;
    let judged: Vec<Utterance> = generated
        .iter()
        .filter(|u| groups.contains_key(classify::seed_intent_of(u)))
        .cloned()
        .collect();
    let verdicts = LmVerdicts::new(&client, &cfg).map_err(err)?;
    let noisy = filter::filter_generated(&verdicts, &groups, &judged, Some(&f.wb.oracle)).map_err(err)?;
    let (pre, post) = (
        noisy.stats.fidelity_before.unwrap_or(0.0),
        noisy.stats.fidelity_after.unwrap_or(0.0),
    );
    ensure(post > pre, format!("lm verdicts: post {post} <= pre {pre}"))?;
    Ok(format!(
        "oracle verdicts: {} kept of {}, fidelity 1.0; lm verdicts: {} kept of {}, fidelity {:.2}% -> {:.2}%",
        oracle_run.kept.len(),
        generated.len(),
        noisy.kept.len(),
        judged.len(),
        pre * 100.0,
        post * 100.0
    ))
}

fn temperature_sweep(f: &Fixture) -> Check {
    let spec = ScenarioSpec {
        repetitions: 3,
        ..f.spec("sweep", Augmentation::Lm, 0.2)
    };
    let points = harness::temperature_sweep(&f.wb, &spec, &[0.2, 0.6, 1.0, 1.4]).map_err(err)?;
    let fid: Vec<f64> = points.iter().map(|p| p.fidelity.overall.unwrap_or(f64::NAN)).collect();
    ensure(
        fid.windows(2).all(|w| w[1] <= w[0]),
        format!("fidelity not non-increasing: {fid:?}"),
    )?;
    Ok(fid
        .iter()
        .zip([0.2, 0.6, 1.0, 1.4])
        .map(|(v, t)| format!("T={t}: {:.2}%", v * 100.0))
        .collect::<Vec<_>>()
        .join(", "))
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(f: &Fixture) -> Check {
    let config = r#"
[dataset]
path = "dataset.json"
format = "native"

[lexicon]
path = "lexicon.tsv"
stopwords = "stopwords.txt"

[classifier]
learning_rates = [5.0]

[[scenarios]]
name = "baseline"
n = 50
repetitions = 2

[[scenarios]]
name = "upsampled"
augmentation = "upsample"
n = 50
repetitions = 2

[[scenarios]]
name = "eda"
augmentation = "eda"
n = 50
repetitions = 2

[[scenarios]]
name = "augmented-filtered-relabelled"
augmentation = "lm"
filter = true
relabel = true
n = 50
repetitions = 2
[scenarios.engine_run]
cache_dir = "determinism-cache"
[scenarios.engine_run.mock]
lexicon = "lexicon.tsv"
stopwords = "stopwords.txt"

[sweep]
scenario = "augmented-filtered-relabelled"
temperatures = [0.5, 1.5]
"#;
    let path = f.dir.path().join("run.toml");
    std::fs::write(&path, config).map_err(err)?;
    let cfg = RunConfig::load(&path).map_err(err)?;
    let first = harness::execute(&cfg, Some(&f.dir.path().join("out-a"))).map_err(err)?;
    let second = harness::execute(&cfg, Some(&f.dir.path().join("out-b"))).map_err(err)?;
    ensure(first.backend_calls > 0, "first run made no backend calls")?;
    ensure(second.backend_calls == 0, format!("second run made {} backend calls", second.backend_calls))?;
    let (a, b) = (snapshot(&first.run_dir), snapshot(&second.run_dir));
    ensure(!a.is_empty(), "empty run directory")?;
    let differing: Vec<&PathBuf> = a
        .keys()
        .chain(b.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    ensure(differing.is_empty(), format!("differing files: {differing:?}"))?;
    Ok(format!(
        "{} identical files; backend calls {} then {}",
        a.len(),
        first.backend_calls,
        second.backend_calls
    ))
}

fn eda_properties(f: &Fixture) -> Check {
    let lex = SynonymLexicon::bundled();
    let mut sentences: Vec<String> = f.corpus.dataset.train().iter().take(100).map(|u| u.text.clone()).collect();
    sentences.extend(
        [
            "play",
            "please play some music now",
            "what is the weather like in the city today",
            "book a table for two at the restaurant tonight",
            "set an alarm",
        ]
        .map(String::from),
    );
    let lexicons = [&lex, &f.corpus.lexicon];
    let mut cases = 0;
    for (s, text) in sentences.iter().enumerate() {
        let words = eda::tokenize(text);
        for lex in lexicons {
            for seed in 0..5u64 {
                let mut rng = util::seeded_rng(seed, &format!("acceptance\u{1f}{s}"));
                let deleted = eda::random_deletion(&words, 0.9, &mut rng);
                ensure(!deleted.is_empty(), format!("deletion emptied {text:?}"))?;

                let swapped = eda::random_swap(&words, 3, &mut rng);
                let (mut x, mut y) = (words.clone(), swapped.clone());
                x.sort();
                y.sort();
                ensure(x == y, format!("swap changed the multiset of {text:?}"))?;

                let replaced = eda::synonym_replacement(&words, 3, lex, &mut rng);
                ensure(replaced.len() == words.len(), "replacement changed the length")?;
                for (before, after) in words.iter().zip(&replaced) {
                    if before != after {
                        ensure(
                            lex.is_eligible(before) && !lex.is_stopword(before),
                            format!("replaced ineligible word {before:?}"),
                        )?;
                        ensure(
                            lex.synonyms(before).is_some_and(|s| s.contains(after)),
                            format!("{after:?} is not a synonym of {before:?}"),
                        )?;
                    }
                }

                let cfg = EdaConfig { rng_seed: seed, ..EdaConfig::default() };
                for op in EdaOp::ALL {
                    let run = |label: &str| {
                        let mut rng = util::seeded_rng(seed, label);
                        op.apply(&words, &cfg, lex, &mut rng)
                    };
                    ensure(run("same") == run("same"), format!("{} is not deterministic", op.name()))?;
                }
                let u = Utterance::seed(text.clone(), "x");
                ensure(
                    eda::eda_augment(&u, 4, &cfg, lex) == eda::eda_augment(&u, 4, &cfg, lex),
                    "eda_augment is not deterministic",
                )?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} seeded cases"))
}

fn oracle_quality(f: &Fixture) -> Check {
    let ds = &f.wb.dataset;
    let classes = ds.intents().to_vec();
    let cfg = TrainConfig::default();
    let a = LinearTextClassifier::train(&classes, ds.train(), ds.val(), &cfg).map_err(err)?;
    let b = LinearTextClassifier::train(&classes, ds.train(), ds.val(), &cfg).map_err(err)?;
    let val = ds.val();
    let hits = val
        .iter()
        .filter(|u| a.predict(&u.text).map(|p| p.intent == u.intent).unwrap_or(false))
        .count();
    let acc = hits as f64 / val.len() as f64;
    ensure(acc >= 0.95, format!("val accuracy {acc}"))?;
    let same_bits = a
        .weights()
        .iter()
        .flatten()
        .zip(b.weights().iter().flatten())
        .all(|(x, y)| x.to_bits() == y.to_bits())
        && a.bias().iter().zip(b.bias()).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same_bits && a.to_json().map_err(err)? == b.to_json().map_err(err)?, "retraining changed the model")?;
    Ok(format!("val accuracy {:.2}%, retraining bit-identical", acc * 100.0))
}

fn corpus_invariants(f: &Fixture) -> Check {
    let ds = &f.corpus.dataset;
    let untouched = |other: &corpus::IntentDataset| {
        other.val() == ds.val() && other.test() == ds.test()
    };
    for seed in 0..5 {
        let plan = FewShotPlan::full(ds, 10, 50, seed).map_err(err)?;
        let (truncated, _) = corpus::truncate_few_shot(ds, &plan).map_err(err)?;
        ensure(untouched(&truncated), "truncate touched val/test")?;
        let up = corpus::upsample(&truncated, &plan).map_err(err)?;
        ensure(untouched(&up), "upsample touched val/test")?;
        for (intent, count) in up.train_counts() {
            ensure(count == 50, format!("{intent} has {count} after upsampling"))?;
        }
        let extra: Vec<Utterance> = ds
            .intents()
            .iter()
            .map(|i| Utterance::new(format!("extra {i}"), i.clone(), Origin::Generated))
            .collect();
        let merged = corpus::merge_augmented(&truncated, &extra).map_err(err)?;
        ensure(untouched(&merged), "merge touched val/test")?;
        ensure(merged.train().len() == truncated.train().len() + extra.len(), "merge lost items")?;

        let partial = corpus::partial_split(ds, corpus::Grouping::Domain, seed as usize % 3, 10, 50, seed)
            .map_err(err)?;
        let up = corpus::upsample(&corpus::truncate_few_shot(ds, &partial).map_err(err)?.0, &partial)
            .map_err(err)?;
        for intent in &partial.few_shot_intents {
            ensure(up.train_for(intent).len() == 50, "partial upsample count")?;
        }
    }
    let path = f.dir.path().join("roundtrip.json");
    corpus::save_native(ds, &path).map_err(err)?;
    let back = corpus::load_dataset(&path, corpus::DatasetFormat::Native).map_err(err)?;
    ensure(
        back.intents() == ds.intents()
            && Split::ALL.iter().all(|s| back.split(*s) == ds.split(*s))
            && back.domains() == ds.domains(),
        "native round trip changed the dataset",
    )?;
    Ok("truncate/upsample/merge keep val and test; upsample gives exactly N; native round trip exact".into())
}

/// Written straight to stderr so the lines show without `--nocapture`.
fn report(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr(), "{line}");
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let fixture = Fixture::new();
    let checks: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("fidelity arithmetic", Box::new(fidelity_arithmetic)),
        ("oos recall arithmetic", Box::new(oos_recall_arithmetic)),
        ("report cell format", Box::new(cell_format)),
        ("end-to-end mock pipeline", Box::new(|| end_to_end(&fixture, started))),
        ("relabelled >= augmented under drift", Box::new(|| relabel_beats_augmented(&fixture))),
        ("filtering", Box::new(|| filtering(&fixture))),
        ("temperature sweep fidelity", Box::new(|| temperature_sweep(&fixture))),
        ("determinism", Box::new(|| determinism(&fixture))),
        ("eda properties", Box::new(|| eda_properties(&fixture))),
        ("oracle quality", Box::new(|| oracle_quality(&fixture))),
        ("corpus invariants", Box::new(|| corpus_invariants(&fixture))),
    ];
    let mut failures = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        match check() {
            Ok(detail) => report(&format!("PASS [{}] {name}: {detail}", i + 1)),
            Err(reason) => {
                report(&format!("FAIL [{}] {name}: {reason}", i + 1));
                failures.push(*name);
            }
        }
    }
    assert!(failures.is_empty(), "failed: {failures:?}");
}
