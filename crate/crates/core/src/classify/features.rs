use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// Lowercased word tokens: maximal runs of alphanumerics and apostrophes.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Unigrams followed by space-joined bigrams.
pub fn terms(text: &str) -> Vec<String> {
    let tokens = tokenize(text);
    let mut out = tokens.clone();
    out.extend(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

/// Unigram + bigram vocabulary with smoothed inverse document frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    terms: Vec<String>,
    doc_freq: Vec<u32>,
    idf: Vec<f64>,
    num_docs: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `cap` terms with the highest document frequency (ties by
    /// term order); indices follow term order.
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut df: BTreeMap<String, u32> = BTreeMap::new();
        let mut num_docs = 0;
        for doc in docs {
            num_docs += 1;
            let mut seen: Vec<String> = terms(doc);
            seen.sort();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u32)> = df.into_iter().collect();
        if ranked.len() > cap {
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            ranked.truncate(cap);
            ranked.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let (terms, doc_freq): (Vec<String>, Vec<u32>) = ranked.into_iter().unzip();
        let idf = doc_freq
            .iter()
            .map(|&d| ((1.0 + num_docs as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        Self::assemble(terms, doc_freq, idf, num_docs)
    }

    fn assemble(terms: Vec<String>, doc_freq: Vec<u32>, idf: Vec<f64>, num_docs: usize) -> Self {
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            terms,
            doc_freq,
            idf,
            num_docs,
            index,
        }
    }

    /// Rebuilds the lookup table after deserialization.
    pub(crate) fn reindex(self) -> Self {
        Self::assemble(self.terms, self.doc_freq, self.idf, self.num_docs)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn doc_freq(&self, term: &str) -> Option<u32> {
        self.index_of(term).map(|i| self.doc_freq[i])
    }

    /// L2-normalized tf-idf vector with raw term counts, as sorted
    /// `(index, value)` pairs.
    pub fn transform(&self, text: &str) -> Vec<(usize, f64)> {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in terms(text) {
            if let Some(i) = self.index_of(&t) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut out: Vec<(usize, f64)> = counts
            .into_iter()
            .map(|(i, c)| (i, c * self.idf[i]))
            .collect();
        let norm = out.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, v) in &mut out {
                *v /= norm;
            }
        }
        out
    }
}
