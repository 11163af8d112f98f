use std::path::Path;
use std::process::Command;

use intent_augment::synthetic::{SyntheticCorpus, SyntheticSpec};

fn bin(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_intent-augment"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        train_per_intent: 40,
        ..SyntheticSpec::default()
    };
    SyntheticCorpus::generate(&spec).unwrap().write_to(dir.path()).unwrap();
    std::fs::write(
        dir.path().join("engine.toml"),
        "cache_dir = \"cache\"\n[mock]\nlexicon = \"lexicon.tsv\"\nstopwords = \"stopwords.txt\"\n",
    )
    .unwrap();
    dir
}

#[test]
fn generate_filter_relabel_pipeline() {
    let dir = fixture();
    let d = dir.path();
    let out = bin(&["ingest", "--input", "dataset.json", "--format", "native", "--output", "native.json"], d);
    assert!(out.contains("9 intents"), "{out}");
    let out = bin(&["train-oracle", "--dataset", "native.json", "--out", "oracle.json", "--learning-rates", "5"], d);
    assert!(out.contains("oracle: val accuracy"), "{out}");

    let gen_args = [
        "generate", "--dataset", "native.json", "--engine", "engine.toml", "--k", "5", "--n", "15",
        "--out", "generated.jsonl",
    ];
    let out = bin(&gen_args, d);
    assert!(out.contains("generated 90 utterances"), "{out}");
    // Everything is cached now.
    let out = bin(&gen_args, d);
    assert!(out.contains("with 0 backend calls"), "{out}");
    let lines = std::fs::read_to_string(d.join("generated.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 90);
    assert!(lines.lines().all(|l| l.contains("\"seed_intent\"")));

    let out = bin(&["relabel", "--generated", "generated.jsonl", "--oracle", "oracle.json", "--out", "relabelled.jsonl"], d);
    assert!(out.contains("relabelled 90"), "{out}");

    for verdicts in ["oracle", "lm"] {
        let out = bin(
            &[
                "filter", "--dataset", "native.json", "--generated", "generated.jsonl", "--oracle", "oracle.json",
                "--engine", "engine.toml", "--k", "5", "--n", "15", "--verdicts", verdicts,
                "--kept-out", "kept.jsonl", "--rejected-out", "rejected.jsonl",
            ],
            d,
        );
        assert!(out.contains("kept"), "{out}");
        let kept = std::fs::read_to_string(d.join("kept.jsonl")).unwrap().lines().count();
        let rejected = std::fs::read_to_string(d.join("rejected.jsonl")).unwrap().lines().count();
        assert_eq!(kept + rejected, 90);
    }

    let out = bin(&["eda", "--dataset", "native.json", "--k", "5", "--n", "15", "--out", "eda.jsonl"], d);
    assert!(out.contains("generated 90"), "{out}");
}

#[test]
fn run_report_and_sweep() {
    let dir = fixture();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        r#"
[dataset]
path = "dataset.json"
format = "native"

[classifier]
learning_rates = [5.0]

[[scenarios]]
name = "baseline"
k = 5
n = 15
repetitions = 2

[[scenarios]]
name = "augmented"
augmentation = "lm"
k = 5
n = 15
repetitions = 2
[scenarios.engine_run]
cache_dir = "cache"
[scenarios.engine_run.mock]
lexicon = "lexicon.tsv"
stopwords = "stopwords.txt"
"#,
    )
    .unwrap();
    let out = bin(&["run", "--config", "run.toml"], d);
    assert!(out.contains("augmented"), "{out}");
    let run_dir = out
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap()
        .to_string();
    assert!(Path::new(&run_dir).join("manifest.json").exists());
    let csv = std::fs::read_to_string(Path::new(&run_dir).join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let out = bin(&["report", &run_dir, "--format", "markdown"], d);
    assert!(out.starts_with("| scenario |"), "{out}");
    assert_eq!(out.lines().count(), 4);

    let out = bin(&["sweep", "--config", "run.toml", "--scenario", "augmented", "--temperatures", "0.5,1.5"], d);
    assert!(out.contains("temperature 0.50: fidelity"), "{out}");
    assert!(out.contains("temperature 1.50: fidelity"), "{out}");
}
