use intent_augment::corpus::{Origin, Utterance};
use intent_augment::review::{self, Answer, Judgment, JudgmentLog, TaskPayload};
use intent_augment::synthetic::{SyntheticCorpus, SyntheticSpec};

fn fixture() -> (intent_augment::corpus::IntentDataset, Vec<Utterance>) {
    let ds = SyntheticCorpus::generate(&SyntheticSpec::default()).unwrap().dataset;
    let generated = ds
        .intents()
        .iter()
        .flat_map(|i| (0..4).map(move |n| Utterance::new(format!("fake {n} for {i}"), i.clone(), Origin::Generated)))
        .collect();
    (ds, generated)
}

fn judge_all(tasks: &[review::ReviewTask], answer: impl Fn(&review::ReviewTask) -> Answer) -> Vec<Judgment> {
    tasks
        .iter()
        .map(|t| Judgment {
            task_id: t.task_id.clone(),
            annotator_id: "a".into(),
            answer: answer(t),
            timestamp: 0,
        })
        .collect()
}

#[test]
fn replaced_fraction_tracks_probability_over_ten_thousand_tasks() {
    let (ds, generated) = fixture();
    let per_intent = 10_000usize.div_ceil(ds.intents().len());
    let tasks = review::build_spot_fake_tasks(&ds, &generated, 0.5, per_intent, 3).unwrap();
    assert!(tasks.len() >= 10_000);
    let replaced = tasks.iter().filter(|t| t.hidden_truth.is_some()).count() as f64 / tasks.len() as f64;
    assert!((0.48..=0.52).contains(&replaced), "{replaced}");

    for t in &tasks {
        let TaskPayload::SpotFake { intent, sentences } = &t.payload else {
            panic!("wrong kind")
        };
        assert_eq!(sentences.len(), review::SPOT_FAKE_SIZE);
        let fakes: Vec<usize> = (0..sentences.len()).filter(|i| sentences[*i].starts_with("fake ")).collect();
        match t.hidden_truth {
            Some(at) => {
                assert_eq!(fakes, [at]);
                assert!(sentences[at].ends_with(intent.as_str()));
            }
            None => assert!(fakes.is_empty()),
        }
    }

    let lazy = judge_all(&tasks, |_| Answer::Label(review::NONE.into()));
    assert_eq!(review::human_error_rate(&tasks, &lazy).unwrap(), replaced);
    let perfect = judge_all(&tasks, |t| match t.hidden_truth {
        Some(i) => Answer::Index(i),
        None => Answer::Label(review::NONE.into()),
    });
    assert_eq!(review::human_error_rate(&tasks, &perfect).unwrap(), 0.0);
}

#[test]
fn task_files_keep_truth_but_serialized_tasks_do_not() {
    let (ds, generated) = fixture();
    let tasks = review::build_spot_fake_tasks(&ds, &generated, 0.5, 4, 9).unwrap();
    for t in &tasks {
        let wire = serde_json::to_string(t).unwrap();
        assert!(!wire.contains("hidden_truth"), "{wire}");
        assert!(wire.contains("\"kind\":\"spot_fake\""), "{wire}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tasks.json");
    review::save_tasks(&tasks, &path).unwrap();
    let back = review::load_tasks(&path).unwrap();
    assert_eq!(
        back.iter().map(|t| t.hidden_truth).collect::<Vec<_>>(),
        tasks.iter().map(|t| t.hidden_truth).collect::<Vec<_>>()
    );
}

#[test]
fn judgment_log_replays_and_rejects_duplicates() {
    let (ds, generated) = fixture();
    let tasks = review::build_spot_fake_tasks(&ds, &generated, 0.5, 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut log = JudgmentLog::open(&path).unwrap();
    let judgments = judge_all(&tasks[..3], |_| Answer::Index(2));
    for (t, j) in tasks.iter().zip(&judgments) {
        log.append(t, j.clone()).unwrap();
    }
    assert!(log.append(&tasks[0], judgments[0].clone()).is_err());
    assert!(log
        .append(&tasks[3], Judgment { task_id: tasks[3].task_id.clone(), answer: Answer::Index(9), ..judgments[0].clone() })
        .is_err());
    drop(log);
    let replayed = JudgmentLog::open(&path).unwrap();
    assert_eq!(replayed.judgments(), judgments.as_slice());
}
