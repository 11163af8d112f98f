//! Intent classifiers (built-in tf-idf logistic regression or an external
//! process), fidelity of generated data against an oracle, and oracle
//! relabelling.

mod external;
pub mod features;
mod linear;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Origin, Utterance};
use crate::error::{Error, Result};

pub use external::ExternalClassifier;
pub use features::Vocabulary;
pub use linear::{LinearTextClassifier, TrainConfig, TrainingMeta};

/// Metadata key holding the label an utterance was generated for.
pub const SEED_INTENT_META: &str = "seed_intent";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub intent: String,
    /// One score per class, in class order.
    pub scores: Vec<f64>,
}

pub trait IntentClassifier: Send + Sync {
    fn classes(&self) -> &[String];

    fn predict(&self, text: &str) -> Result<Prediction>;

    /// Predictions in input order.
    fn predict_all(&self, texts: &[&str]) -> Result<Vec<Prediction>> {
        texts.iter().map(|t| self.predict(t)).collect()
    }
}

/// Parallel batch prediction for the built-in classifier.
pub fn predict_parallel(clf: &LinearTextClassifier, texts: &[&str]) -> Vec<Prediction> {
    texts
        .par_iter()
        .map(|t| clf.predict(t).expect("built-in prediction is infallible"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentFidelity {
    pub total: usize,
    pub matching: usize,
    pub fidelity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub per_intent: BTreeMap<String, IntentFidelity>,
    pub total: usize,
    pub matching: usize,
    /// Absent when nothing was scored.
    pub overall: Option<f64>,
    /// seed intent -> oracle prediction -> count
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

/// `matching / total`, or `None` for an empty set.
pub fn fidelity_ratio(matching: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| matching as f64 / total as f64)
}

impl FidelityReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for (seed, predicted) in pairs {
            *confusion
                .entry(seed.to_string())
                .or_default()
                .entry(predicted.to_string())
                .or_default() += 1;
        }
        let mut report = FidelityReport::default();
        for (seed, row) in &confusion {
            let total: usize = row.values().sum();
            let matching = row.get(seed).copied().unwrap_or(0);
            report.per_intent.insert(
                seed.clone(),
                IntentFidelity {
                    total,
                    matching,
                    fidelity: matching as f64 / total as f64,
                },
            );
            report.total += total;
            report.matching += matching;
        }
        report.overall = fidelity_ratio(report.matching, report.total);
        report.confusion = confusion;
        report
    }

    /// The `n` most frequent wrong predictions for `seed_intent`, most common
    /// first (ties by name).
    pub fn top_confusions(&self, seed_intent: &str, n: usize) -> Vec<(String, usize)> {
        let mut row: Vec<(String, usize)> = self
            .confusion
            .get(seed_intent)
            .map(|r| {
                r.iter()
                    .filter(|(p, _)| p.as_str() != seed_intent)
                    .map(|(p, c)| (p.clone(), *c))
                    .collect()
            })
            .unwrap_or_default();
        row.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        row.truncate(n);
        row
    }
}

fn check_coverage(oracle: &dyn IntentClassifier, generated: &[Utterance]) -> Result<()> {
    for u in generated {
        if !oracle.classes().iter().any(|c| c == &u.intent) {
            return Err(Error::UnknownIntent {
                intent: u.intent.clone(),
                context: "not an oracle class".into(),
            });
        }
    }
    Ok(())
}

/// Share of utterances the oracle labels with their current intent.
pub fn fidelity(oracle: &dyn IntentClassifier, generated: &[Utterance]) -> Result<FidelityReport> {
    check_coverage(oracle, generated)?;
    let texts: Vec<&str> = generated.iter().map(|u| u.text.as_str()).collect();
    let predictions = oracle.predict_all(&texts)?;
    Ok(FidelityReport::from_pairs(
        generated
            .iter()
            .zip(&predictions)
            .map(|(u, p)| (u.intent.as_str(), p.intent.as_str())),
    ))
}

/// Replaces each label with the oracle's prediction. The first label an
/// utterance carried is kept under [`SEED_INTENT_META`].
pub fn relabel(oracle: &dyn IntentClassifier, generated: &[Utterance]) -> Result<Vec<Utterance>> {
    check_coverage(oracle, generated)?;
    let texts: Vec<&str> = generated.iter().map(|u| u.text.as_str()).collect();
    let predictions = oracle.predict_all(&texts)?;
    Ok(generated
        .iter()
        .zip(predictions)
        .map(|(u, p)| {
            let mut out = u.clone();
            out.source_meta
                .entry(SEED_INTENT_META.to_string())
                .or_insert_with(|| u.intent.clone());
            out.intent = p.intent;
            out.origin = Origin::Relabelled;
            out
        })
        .collect())
}

/// The label an utterance was originally generated for.
pub fn seed_intent_of(u: &Utterance) -> &str {
    u.source_meta
        .get(SEED_INTENT_META)
        .map(String::as_str)
        .unwrap_or(&u.intent)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic classifier for fidelity arithmetic.
    struct Table(Vec<String>, BTreeMap<String, String>);

    impl IntentClassifier for Table {
        fn classes(&self) -> &[String] {
            &self.0
        }
        fn predict(&self, text: &str) -> Result<Prediction> {
            Ok(Prediction {
                intent: self.1.get(text).cloned().unwrap_or_else(|| self.0[0].clone()),
                scores: vec![],
            })
        }
    }

    #[test]
    fn ratio_matches_reported_values() {
        let pct = |m, t| (fidelity_ratio(m, t).unwrap() * 10_000.0).round() / 100.0;
        assert_eq!(pct(282, 468), 60.26);
        assert_eq!(pct(269, 371), 72.51);
        assert_eq!(fidelity_ratio(0, 0), None);
    }

    #[test]
    fn report_rows_sum_to_totals() {
        let pairs = [("a", "a"), ("a", "b"), ("a", "b"), ("b", "b"), ("a", "c")];
        let r = FidelityReport::from_pairs(pairs);
        assert_eq!(r.per_intent["a"].total, 4);
        assert_eq!(r.per_intent["a"].matching, 1);
        assert_eq!(r.overall, Some(0.4));
        for (seed, row) in &r.confusion {
            assert_eq!(row.values().sum::<usize>(), r.per_intent[seed].total);
        }
        assert_eq!(r.top_confusions("a", 2), vec![("b".to_string(), 2), ("c".to_string(), 1)]);
        let empty = FidelityReport::from_pairs(std::iter::empty());
        assert_eq!(empty.overall, None);
        assert_eq!(empty.total, 0);
    }

    #[test]
    fn relabel_is_idempotent_and_preserves_seed_intent() {
        let classes: Vec<String> = ["a", "b", "oos"].iter().map(|s| s.to_string()).collect();
        let table: BTreeMap<String, String> = [("x", "a"), ("y", "b"), ("z", "oos")]
            .iter()
            .map(|(t, i)| (t.to_string(), i.to_string()))
            .collect();
        let oracle = Table(classes, table);
        let gen = vec![
            Utterance::new("x", "a", Origin::Generated),
            Utterance::new("y", "a", Origin::Generated),
            Utterance::new("z", "b", Origin::Generated),
        ];
        let once = relabel(&oracle, &gen).unwrap();
        assert_eq!(once[0].intent, "a");
        assert_eq!(once[1].intent, "b");
        assert_eq!(once[2].intent, "oos");
        assert!(once.iter().all(|u| u.origin == Origin::Relabelled));
        assert_eq!(seed_intent_of(&once[1]), "a");
        assert_eq!(relabel(&oracle, &once).unwrap(), once);
        assert_eq!(fidelity(&oracle, &once).unwrap().overall, Some(1.0));
        assert!(relabel(&oracle, &[]).unwrap().is_empty());

        let unknown = vec![Utterance::new("x", "zzz", Origin::Generated)];
        assert!(fidelity(&oracle, &unknown).is_err());
    }
}
