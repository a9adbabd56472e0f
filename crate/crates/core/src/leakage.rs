//! Train/test contamination checks: exact hash matches after
//! normalization, token-Jaccard fuzzy matches, n-gram overlap, and
//! provenance completeness against the pool.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pool::Pool;

pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.8;
pub const INDEX_NGRAMS: [usize; 3] = [3, 4, 5];

#[derive(Debug, Error, PartialEq)]
pub enum LeakageError {
    #[error("test corpus is empty")]
    EmptyTestCorpus,
    #[error("fuzzy threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("n-gram length must be at least 1")]
    InvalidN,
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let stripped: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn text_hash(text: &str) -> [u8; 32] {
    Sha256::digest(normalize(text).as_bytes()).into()
}

/// Distinct n-grams, each joined with single spaces.
pub fn ngrams(text: &str, n: usize) -> HashSet<String> {
    let toks = tokens(text);
    if n == 0 || toks.len() < n {
        return HashSet::new();
    }
    toks.windows(n).map(|w| w.join(" ")).collect()
}

fn corpus_ngrams<S: AsRef<str>>(corpus: &[S], n: usize) -> HashSet<String> {
    corpus.iter().flat_map(|s| ngrams(s.as_ref(), n)).collect()
}

#[derive(Clone, Debug)]
pub struct TestIndex {
    hashes: HashSet<[u8; 32]>,
    ngrams: BTreeMap<usize, HashSet<String>>,
    samples: usize,
}

impl TestIndex {
    pub fn hash_count(&self) -> usize {
        self.hashes.len()
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn contains(&self, text: &str) -> bool {
        self.hashes.contains(&text_hash(text))
    }

    pub fn ngram_set(&self, n: usize) -> Option<&HashSet<String>> {
        self.ngrams.get(&n)
    }
}

pub fn build_test_index<S: AsRef<str>>(test: &[S]) -> Result<TestIndex, LeakageError> {
    if test.is_empty() {
        return Err(LeakageError::EmptyTestCorpus);
    }
    Ok(TestIndex {
        hashes: test.iter().map(|s| text_hash(s.as_ref())).collect(),
        ngrams: INDEX_NGRAMS.iter().map(|&n| (n, corpus_ngrams(test, n))).collect(),
        samples: test.len(),
    })
}

/// Drops train samples whose normalized text is in the index. Kept samples
/// stay in input order.
pub fn exact_match_filter<S: AsRef<str> + Clone>(train: &[S], index: &TestIndex) -> (Vec<S>, usize) {
    let kept: Vec<S> = train.iter().filter(|s| !index.contains(s.as_ref())).cloned().collect();
    let removed = train.len() - kept.len();
    (kept, removed)
}

/// Jaccard similarity of distinct token sets; two empty sets score 0.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let a: HashSet<String> = tokens(a).into_iter().collect();
    let b: HashSet<String> = tokens(b).into_iter().collect();
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Number of train samples whose best token-Jaccard against any test
/// sample reaches `threshold`.
pub fn fuzzy_match_count<S: AsRef<str>, T: AsRef<str>>(
    train: &[S],
    test: &[T],
    threshold: f64,
) -> Result<usize, LeakageError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(LeakageError::InvalidThreshold(threshold));
    }
    let test_sets: Vec<HashSet<String>> = test.iter().map(|t| tokens(t.as_ref()).into_iter().collect()).collect();
    let mut postings: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, set) in test_sets.iter().enumerate() {
        for tok in set {
            postings.entry(tok.as_str()).or_default().push(i);
        }
    }
    let mut count = 0;
    for sample in train {
        let set: HashSet<String> = tokens(sample.as_ref()).into_iter().collect();
        let mut shared: HashMap<usize, usize> = HashMap::new();
        for tok in &set {
            for &i in postings.get(tok.as_str()).into_iter().flatten() {
                *shared.entry(i).or_default() += 1;
            }
        }
        let hit = shared.iter().any(|(&i, &inter)| {
            let union = set.len() + test_sets[i].len() - inter;
            inter as f64 / union as f64 >= threshold
        });
        if hit {
            count += 1;
        }
    }
    Ok(count)
}

/// Percentage of distinct test n-grams that also occur in train. A test
/// corpus with no n-grams of this length yields 0.
pub fn ngram_overlap<S: AsRef<str>, T: AsRef<str>>(train: &[S], test: &[T], n: usize) -> Result<f64, LeakageError> {
    if n == 0 {
        return Err(LeakageError::InvalidN);
    }
    let test_grams = corpus_ngrams(test, n);
    Ok(overlap_against(&corpus_ngrams(train, n), &test_grams, n))
}

fn overlap_against(train_grams: &HashSet<String>, test_grams: &HashSet<String>, n: usize) -> f64 {
    if test_grams.is_empty() {
        log::warn!("test corpus has no {n}-grams; overlap reported as 0");
        return 0.0;
    }
    let shared = test_grams.iter().filter(|g| train_grams.contains(*g)).count();
    100.0 * shared as f64 / test_grams.len() as f64
}

/// A training sample, optionally traced to the pool entry it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub text: String,
    #[serde(default)]
    pub source: Option<String>,
}

impl AsRef<str> for TrainSample {
    fn as_ref(&self) -> &str {
        &self.text
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub train_samples: usize,
    pub test_samples: usize,
    pub exact_matches: usize,
    pub fuzzy_matches: usize,
    pub ngram_overlap: BTreeMap<usize, f64>,
    pub provenance_complete: bool,
    /// Train sample positions lacking a complete pool provenance trail.
    pub untraced: Vec<usize>,
}

pub fn audit(
    train: &[TrainSample],
    test: &[String],
    pool: &Pool,
    fuzzy_threshold: f64,
) -> Result<AuditReport, LeakageError> {
    let index = build_test_index(test)?;
    let exact_matches = train.iter().filter(|s| index.contains(&s.text)).count();
    let fuzzy_matches = fuzzy_match_count(train, test, fuzzy_threshold)?;
    let ngram_overlap = INDEX_NGRAMS
        .iter()
        .map(|&n| {
            let test_grams = index.ngram_set(n).expect("indexed length");
            (n, overlap_against(&corpus_ngrams(train, n), test_grams, n))
        })
        .collect();
    let untraced: Vec<usize> = train
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            !s.source
                .as_deref()
                .and_then(|id| pool.get(id))
                .is_some_and(|e| e.provenance.is_complete())
        })
        .map(|(i, _)| i)
        .collect();
    Ok(AuditReport {
        train_samples: train.len(),
        test_samples: test.len(),
        exact_matches,
        fuzzy_matches,
        ngram_overlap,
        provenance_complete: untraced.is_empty(),
        untraced,
    })
}
