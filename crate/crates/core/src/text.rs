//! Tokenization, BM25 scoring and longest-common-substring matching shared
//! by the value index and the lexical schema scorer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Lowercase and split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Distinct tokens in first-occurrence order.
pub fn distinct_tokens(text: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    tokenize(text)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    /// Non-negative idf: `ln((N - df + 0.5) / (df + 0.5) + 1)`.
    pub fn idf(&self, n_docs: usize, df: usize) -> f64 {
        let n = n_docs as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn term_weight(&self, tf: f64, doc_len: f64, avg_len: f64, idf: f64) -> f64 {
        let norm = if avg_len > 0.0 { doc_len / avg_len } else { 0.0 };
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * norm))
    }
}

/// A small in-memory BM25 corpus: one term-frequency map per document.
#[derive(Debug, Clone, Default)]
pub struct Bm25Corpus {
    docs: Vec<HashMap<String, u32>>,
    lengths: Vec<usize>,
    df: HashMap<String, usize>,
    total_len: usize,
}

impl Bm25Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, tokens: &[String]) -> usize {
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for t in tf.keys() {
            *self.df.entry(t.clone()).or_default() += 1;
        }
        self.lengths.push(tokens.len());
        self.total_len += tokens.len();
        self.docs.push(tf);
        self.docs.len() - 1
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.docs.len() as f64
        }
    }

    /// Score one document against a set of distinct query terms.
    pub fn score(&self, doc: usize, query_terms: &[String], params: &Bm25Params) -> f64 {
        let avg = self.avg_len();
        let n = self.docs.len();
        let tf = &self.docs[doc];
        query_terms
            .iter()
            .filter_map(|term| {
                let f = *tf.get(term)?;
                let idf = params.idf(n, self.df[term]);
                Some(params.term_weight(f as f64, self.lengths[doc] as f64, avg, idf))
            })
            .sum()
    }
}

/// Length (in chars) of the longest common substring, compared
/// case-insensitively. Classic O(n·m) dynamic program over one rolling row.
pub fn longest_common_substring(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().flat_map(char::to_lowercase).collect();
    let b: Vec<char> = b.chars().flat_map(char::to_lowercase).collect();
    lcs_chars(&a, &b)
}

pub(crate) fn lcs_chars(a: &[char], b: &[char]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &ca in a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}
