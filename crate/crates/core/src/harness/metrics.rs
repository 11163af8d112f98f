use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy over pairs whose gold label is not `oos_label`.
pub fn inscope_accuracy(pairs: &[(String, String)], oos_label: &str) -> Result<f64> {
    let (hits, total) = pairs
        .iter()
        .filter(|(gold, _)| gold != oos_label)
        .fold((0usize, 0usize), |(h, t), (gold, pred)| (h + usize::from(gold == pred), t + 1));
    if total == 0 {
        return Err(Error::Metric("no in-scope pairs".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Share of gold out-of-scope pairs predicted as `oos_label`.
pub fn oos_recall(pairs: &[(String, String)], oos_label: &str) -> Result<f64> {
    let (hits, total) = pairs
        .iter()
        .filter(|(gold, _)| gold == oos_label)
        .fold((0usize, 0usize), |(h, t), (_, pred)| (h + usize::from(pred == oos_label), t + 1));
    if total == 0 {
        return Err(Error::Metric("no out-of-scope pairs".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }

    /// Percent cell, e.g. `94.07 (0.18)`.
    pub fn cell(&self) -> String {
        format_cell(self.mean * 100.0, self.std * 100.0)
    }
}

/// Formats already-scaled numbers as `mean (std)` with two decimals.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2} ({std:.2})")
}

/// Metrics of one repetition. Optional values are absent when they do not
/// apply (no OOS data, no generation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionMetrics {
    pub seed: u64,
    pub inscope_accuracy: f64,
    pub oos_recall: Option<f64>,
    pub few_shot_accuracy: Option<f64>,
    pub fidelity: Option<f64>,
}

impl RepetitionMetrics {
    /// Component-wise mean; optional fields are averaged over the runs that
    /// have them.
    pub fn average(seed: u64, runs: &[RepetitionMetrics]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Metric("nothing to average".into()));
        }
        let opt = |f: fn(&RepetitionMetrics) -> Option<f64>| {
            let v: Vec<f64> = runs.iter().filter_map(f).collect();
            Aggregate::of(&v).map(|a| a.mean)
        };
        Ok(Self {
            seed,
            inscope_accuracy: runs.iter().map(|r| r.inscope_accuracy).sum::<f64>() / runs.len() as f64,
            oos_recall: opt(|r| r.oos_recall),
            few_shot_accuracy: opt(|r| r.few_shot_accuracy),
            fidelity: opt(|r| r.fidelity),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub repetitions: Vec<RepetitionMetrics>,
    pub inscope_accuracy: Aggregate,
    pub oos_recall: Option<Aggregate>,
    pub few_shot_accuracy: Option<Aggregate>,
    pub fidelity: Option<Aggregate>,
}

impl MetricsReport {
    pub fn from_repetitions(scenario: impl Into<String>, repetitions: Vec<RepetitionMetrics>) -> Result<Self> {
        let all = |f: fn(&RepetitionMetrics) -> Option<f64>| -> Option<Aggregate> {
            let v: Vec<f64> = repetitions.iter().filter_map(f).collect();
            // Partial presence would aggregate over fewer than all repetitions.
            (v.len() == repetitions.len()).then(|| Aggregate::of(&v)).flatten()
        };
        let inscope: Vec<f64> = repetitions.iter().map(|r| r.inscope_accuracy).collect();
        let inscope_accuracy =
            Aggregate::of(&inscope).ok_or_else(|| Error::Metric("no repetitions".into()))?;
        Ok(Self {
            scenario: scenario.into(),
            oos_recall: all(|r| r.oos_recall),
            few_shot_accuracy: all(|r| r.few_shot_accuracy),
            fidelity: all(|r| r.fidelity),
            inscope_accuracy,
            repetitions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(xs: &[(&str, &str)]) -> Vec<(String, String)> {
        xs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn accuracy_and_recall() {
        let p = pairs(&[
            ("a", "a"), ("b", "b"), ("c", "a"),
            ("oos", "oos"), ("oos", "a"), ("oos", "oos"), ("oos", "b"), ("oos", "oos"),
        ]);
        assert_eq!(inscope_accuracy(&p, "oos").unwrap(), 2.0 / 3.0);
        assert_eq!(oos_recall(&p, "oos").unwrap(), 0.6);
        assert!(inscope_accuracy(&pairs(&[("oos", "oos")]), "oos").is_err());
        assert!(oos_recall(&pairs(&[("a", "a")]), "oos").is_err());

        let mut flagged = vec![("oos".to_string(), "oos".to_string()); 429];
        flagged.extend(vec![("oos".to_string(), "x".to_string()); 571]);
        assert_eq!(oos_recall(&flagged, "oos").unwrap() * 100.0, 42.9);
    }

    #[test]
    fn aggregates_and_cells() {
        assert_eq!(format_cell(94.07, 0.18), "94.07 (0.18)");
        let a = Aggregate::of(&[0.5, 0.7]).unwrap();
        assert!((a.mean - 0.6).abs() < 1e-12);
        assert!((a.std - 0.1).abs() < 1e-12);
        assert_eq!(a.cell(), "60.00 (10.00)");
        assert_eq!(Aggregate::of(&[]), None);
    }
}
