use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::Vocabulary;
use super::{IntentClassifier, Prediction};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::util;

const MODEL_FORMAT: &str = "intent-augment/linear-tfidf/v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub vocab_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5.0,
            l2: 1e-4,
            max_epochs: 200,
            patience: 10,
            vocab_cap: 50_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub config: TrainConfig,
}

/// Multinomial logistic regression over tf-idf features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTextClassifier {
    format: String,
    classes: Vec<String>,
    vocabulary: Vocabulary,
    /// One row of `vocabulary.len()` weights per class.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    meta: TrainingMeta,
}

type Sparse = Vec<(usize, f64)>;

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// First index of the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

struct Params {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Params {
    fn scores(&self, x: &Sparse) -> Vec<f64> {
        self.bias
            .iter()
            .zip(&self.weights)
            .map(|(b, row)| b + x.iter().map(|(i, v)| row[*i] * v).sum::<f64>())
            .collect()
    }

    /// (accuracy, mean cross-entropy)
    fn evaluate(&self, xs: &[Sparse], ys: &[usize]) -> (f64, f64) {
        let mut correct = 0usize;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let mut s = self.scores(x);
            if argmax(&s) == y {
                correct += 1;
            }
            softmax_in_place(&mut s);
            loss -= s[y].max(1e-300).ln();
        }
        let n = ys.len() as f64;
        (correct as f64 / n, loss / n)
    }
}

impl LinearTextClassifier {
    /// Full-batch gradient descent on the regularized cross-entropy. The
    /// returned weights are those of the epoch with the best validation
    /// accuracy, ties broken by lower validation loss.
    pub fn train(
        classes: &[String],
        train: &[Utterance],
        val: &[Utterance],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Training(format!(
                "need at least two classes, got {}",
                classes.len()
            )));
        }
        if val.is_empty() {
            return Err(Error::Training("empty validation set".into()));
        }
        let class_index: BTreeMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        if class_index.len() != classes.len() {
            return Err(Error::Training("duplicate class names".into()));
        }
        let label = |u: &Utterance, split: &str| {
            class_index.get(u.intent.as_str()).copied().ok_or_else(|| {
                Error::Training(format!("{split} label `{}` is not a class", u.intent))
            })
        };
        let train_y = train
            .iter()
            .map(|u| label(u, "train"))
            .collect::<Result<Vec<_>>>()?;
        let val_y = val
            .iter()
            .map(|u| label(u, "validation"))
            .collect::<Result<Vec<_>>>()?;
        let mut per_class = vec![0usize; classes.len()];
        for &y in &train_y {
            per_class[y] += 1;
        }
        if let Some(missing) = per_class.iter().position(|&c| c == 0) {
            return Err(Error::Training(format!(
                "class `{}` has no training examples",
                classes[missing]
            )));
        }

        let vocabulary = Vocabulary::fit(train.iter().map(|u| u.text.as_str()), cfg.vocab_cap);
        let train_x: Vec<Sparse> = train.iter().map(|u| vocabulary.transform(&u.text)).collect();
        let val_x: Vec<Sparse> = val.iter().map(|u| vocabulary.transform(&u.text)).collect();

        let k = classes.len();
        let dim = vocabulary.len();
        let n = train_x.len() as f64;
        let mut params = Params {
            weights: vec![vec![0.0; dim]; k],
            bias: vec![0.0; k],
        };
        let mut best = (params.evaluate(&val_x, &val_y), 0usize);
        let mut best_params = (params.weights.clone(), params.bias.clone());
        let mut stale = 0;
        let mut epochs_run = 0;

        for epoch in 1..=cfg.max_epochs {
            epochs_run = epoch;
            let mut grad_w = vec![vec![0.0; dim]; k];
            let mut grad_b = vec![0.0; k];
            for (x, &y) in train_x.iter().zip(&train_y) {
                let mut p = params.scores(x);
                softmax_in_place(&mut p);
                p[y] -= 1.0;
                for (c, residual) in p.iter().enumerate() {
                    grad_b[c] += residual;
                    let row = &mut grad_w[c];
                    for (i, v) in x {
                        row[*i] += residual * v;
                    }
                }
            }
            for c in 0..k {
                params.bias[c] -= cfg.learning_rate * grad_b[c] / n;
                let row = &mut params.weights[c];
                for (w, g) in row.iter_mut().zip(&grad_w[c]) {
                    *w -= cfg.learning_rate * (g / n + cfg.l2 * *w);
                }
            }

            let (acc, loss) = params.evaluate(&val_x, &val_y);
            let ((best_acc, best_loss), _) = best;
            if acc > best_acc || (acc == best_acc && loss < best_loss) {
                best = ((acc, loss), epoch);
                best_params = (params.weights.clone(), params.bias.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }

        let ((best_val_accuracy, best_val_loss), best_epoch) = best;
        Ok(Self {
            format: MODEL_FORMAT.into(),
            classes: classes.to_vec(),
            vocabulary,
            weights: best_params.0,
            bias: best_params.1,
            meta: TrainingMeta {
                epochs_run,
                best_epoch,
                best_val_accuracy,
                best_val_loss,
                config: *cfg,
            },
        })
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Affine class scores before the softmax.
    pub fn decision_scores(&self, text: &str) -> Vec<f64> {
        let x = self.vocabulary.transform(text);
        self.bias
            .iter()
            .zip(&self.weights)
            .map(|(b, row)| b + x.iter().map(|(i, v)| row[*i] * v).sum::<f64>())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut model: Self = serde_json::from_str(text)?;
        if model.format != MODEL_FORMAT {
            return Err(Error::Parse(format!(
                "unsupported model format `{}`",
                model.format
            )));
        }
        if model.weights.len() != model.classes.len() || model.bias.len() != model.classes.len() {
            return Err(Error::Parse("weight rows do not match classes".into()));
        }
        model.vocabulary = model.vocabulary.reindex();
        if model.weights.iter().any(|row| row.len() != model.vocabulary.len()) {
            return Err(Error::Parse("weight columns do not match vocabulary".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&util::read_to_string(path)?)
    }
}

impl IntentClassifier for LinearTextClassifier {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn predict(&self, text: &str) -> Result<Prediction> {
        let mut scores = self.decision_scores(text);
        let best = argmax(&scores);
        softmax_in_place(&mut scores);
        Ok(Prediction {
            intent: self.classes[best].clone(),
            scores,
        })
    }
}
