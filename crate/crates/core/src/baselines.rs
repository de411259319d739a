//! Discrete retrieval baselines: alias tables with empirical priors, their
//! unigram/bigram extension, and BM25 over entity titles.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{EntityCatalog, MentionExample};
use crate::features::tokenize;
use crate::{Error, Result};

/// Candidates kept per alias.
pub const MAX_CANDIDATES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntity {
    pub entity_id: String,
    pub score: f64,
}

/// Lowercased tokens joined by single spaces.
pub fn normalize_alias(text: &str) -> String {
    tokenize(text).join(" ")
}

fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

type Counts = BTreeMap<String, BTreeMap<String, u64>>;

/// Priors per alias, sorted by prior descending then id, truncated.
fn priors(counts: &Counts) -> BTreeMap<String, Vec<ScoredEntity>> {
    counts
        .iter()
        .map(|(alias, per_entity)| {
            let total: u64 = per_entity.values().sum();
            let mut list: Vec<ScoredEntity> = per_entity
                .iter()
                .map(|(id, &c)| ScoredEntity {
                    entity_id: id.clone(),
                    score: c as f64 / total as f64,
                })
                .collect();
            list.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.entity_id.cmp(&b.entity_id))
            });
            list.truncate(MAX_CANDIDATES);
            (alias.clone(), list)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtensionMode {
    /// Extension aliases are consulted only when the full alias misses.
    #[default]
    Fallback,
    /// Extension counts are added into the original counts.
    Merged,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AliasTable {
    pub entries: BTreeMap<String, Vec<ScoredEntity>>,
    /// `alias -> entity_id -> count`.
    pub counts: BTreeMap<String, BTreeMap<String, u64>>,
    pub extension: BTreeMap<String, Vec<ScoredEntity>>,
    pub extension_counts: BTreeMap<String, BTreeMap<String, u64>>,
}

impl AliasTable {
    /// Rebuilds a table from stored candidate lists; counts are unknown.
    pub fn from_entries(entries: BTreeMap<String, Vec<ScoredEntity>>) -> Self {
        Self {
            entries,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_alias_table(train: &[MentionExample]) -> AliasTable {
    let mut counts = Counts::new();
    for ex in train {
        let alias = join_tokens(&ex.features.span.tokens);
        if alias.is_empty() {
            continue;
        }
        *counts
            .entry(alias)
            .or_default()
            .entry(ex.gold_entity_id.clone())
            .or_default() += 1;
    }
    AliasTable {
        entries: priors(&counts),
        counts,
        ..AliasTable::default()
    }
}

/// Adds every unigram and bigram of each training span as an alias of the
/// gold entity.
pub fn extend_alias_table(table: &AliasTable, train: &[MentionExample], mode: ExtensionMode) -> AliasTable {
    let mut ext = Counts::new();
    for ex in train {
        let tokens = &ex.features.span.tokens;
        let mut grams: BTreeSet<String> = tokens.iter().cloned().collect();
        grams.extend(tokens.windows(2).map(join_tokens));
        // The full span is already an original alias.
        grams.remove(&join_tokens(tokens));
        for g in grams {
            *ext.entry(g)
                .or_default()
                .entry(ex.gold_entity_id.clone())
                .or_default() += 1;
        }
    }
    let mut out = table.clone();
    match mode {
        ExtensionMode::Fallback => {
            out.extension = priors(&ext);
            out.extension_counts = ext;
        }
        ExtensionMode::Merged => {
            for (alias, per_entity) in ext {
                let orig = out.counts.entry(alias).or_default();
                for (id, c) in per_entity {
                    *orig.entry(id).or_default() += c;
                }
            }
            out.entries = priors(&out.counts);
        }
    }
    out
}

/// Exact lookup of the normalized span; the extension is consulted only
/// on a miss.
pub fn alias_lookup(table: &AliasTable, span: &str, k: usize) -> Result<Vec<ScoredEntity>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let alias = normalize_alias(span);
    let list = table
        .entries
        .get(&alias)
        .or_else(|| table.extension.get(&alias));
    Ok(list
        .map(|l| l.iter().take(k).cloned().collect())
        .unwrap_or_default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    /// `token -> [(doc, tf)]`, docs ascending.
    pub postings: BTreeMap<String, Vec<(u32, u32)>>,
    pub doc_lengths: Vec<u32>,
    pub avgdl: f64,
    pub ids: Vec<String>,
    pub params: Bm25Params,
}

impl Bm25Index {
    pub fn len(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lengths.is_empty()
    }
}

/// Indexes entity titles only.
pub fn build_bm25(catalog: &EntityCatalog, params: Bm25Params) -> Bm25Index {
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(catalog.len());
    let mut ids = Vec::with_capacity(catalog.len());
    for (d, record) in catalog.records().iter().enumerate() {
        let tokens = tokenize(&record.title);
        doc_lengths.push(tokens.len() as u32);
        ids.push(record.entity_id.clone());
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (t, n) in tf {
            postings.entry(t).or_default().push((d as u32, n));
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
    let avgdl = if doc_lengths.is_empty() {
        0.0
    } else {
        total as f64 / doc_lengths.len() as f64
    };
    Bm25Index {
        postings,
        doc_lengths,
        avgdl,
        ids,
        params,
    }
}

/// Okapi BM25 over the distinct query tokens. Documents sharing no token
/// are not returned.
pub fn bm25_search(index: &Bm25Index, span: &str, k: usize) -> Result<Vec<ScoredEntity>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let n = index.len() as f64;
    let Bm25Params { k1, b } = index.params;
    let terms: BTreeSet<String> = tokenize(span).into_iter().collect();
    let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
    for term in &terms {
        let Some(list) = index.postings.get(term) else {
            continue;
        };
        let df = list.len() as f64;
        let idf = libm::log((n - df + 0.5) / (df + 0.5) + 1.0);
        for &(d, tf) in list {
            let tf = f64::from(tf);
            let dl = f64::from(index.doc_lengths[d as usize]);
            let norm = k1 * (1.0 - b + b * dl / index.avgdl);
            *scores.entry(d).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
        }
    }
    let mut hits: Vec<ScoredEntity> = scores
        .into_iter()
        .map(|(d, score)| ScoredEntity {
            entity_id: index.ids[d as usize].clone(),
            score,
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.entity_id.cmp(&b.entity_id))
    });
    hits.truncate(k);
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityRecord;
    use crate::features::{MentionFeatures, TextFeature};
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    fn example(span: &str, gold: &str) -> MentionExample {
        MentionExample {
            mention_id: format!("{span}/{gold}"),
            features: MentionFeatures {
                span: TextFeature::new(tokenize(span)),
                left_context: TextFeature::default(),
                right_context: TextFeature::default(),
                sentence: TextFeature::new(tokenize(span)),
            },
            gold_entity_id: gold.to_string(),
        }
    }

    fn catalog(titles: &[(&str, &str)]) -> EntityCatalog {
        EntityCatalog::new(
            titles
                .iter()
                .map(|(id, t)| EntityRecord {
                    entity_id: id.to_string(),
                    title: t.to_string(),
                    paragraph: String::new(),
                    categories: vec![],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn priors_from_counts() {
        let train = vec![
            example("Costa", "Q1"),
            example("costa", "Q1"),
            example("COSTA", "Q1"),
            example("costa", "Q2"),
        ];
        let t = build_alias_table(&train);
        let got = alias_lookup(&t, "costa", 10).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].entity_id, "Q1");
        assert!((got[0].score - 0.75).abs() < 1e-12);
        assert!((got[1].score - 0.25).abs() < 1e-12);
        assert_eq!(alias_lookup(&t, "costa", 1).unwrap().len(), 1);
        assert!(alias_lookup(&t, "european eads", 5).unwrap().is_empty());
        assert!(alias_lookup(&t, "costa", 0).is_err());
    }

    #[test]
    fn truncates_to_top_hundred() {
        let mut train = Vec::new();
        for i in 0..150 {
            for _ in 0..(1 + i % 3) {
                train.push(example("smith", &format!("E{i:03}")));
            }
        }
        let t = build_alias_table(&train);
        let list = &t.entries["smith"];
        assert_eq!(list.len(), MAX_CANDIDATES);
        // 50 entities have count 3, 50 count 2; all of them fit.
        assert!(list.iter().all(|c| t.counts["smith"][&c.entity_id] >= 2));
        let total: u64 = t.counts["smith"].values().sum();
        assert_eq!(list[0].entity_id, "E002");
        assert!((list[0].score - 3.0 / total as f64).abs() < 1e-12);
        assert!(list.iter().map(|c| c.score).sum::<f64>() <= 1.0);
    }

    #[test]
    fn extension_falls_back() {
        let train = vec![example("jorge costa", "Q1"), example("costa", "Q2")];
        let base = build_alias_table(&train);
        let ext = extend_alias_table(&base, &train, ExtensionMode::Fallback);
        assert_eq!(alias_lookup(&ext, "jorge", 5).unwrap()[0].entity_id, "Q1");
        assert_eq!(alias_lookup(&ext, "jorge costa", 5).unwrap()[0].entity_id, "Q1");
        // The original alias wins over the extension.
        let costa = alias_lookup(&ext, "costa", 5).unwrap();
        assert_eq!(costa.len(), 1);
        assert_eq!(costa[0].entity_id, "Q2");
        assert!(alias_lookup(&base, "jorge", 5).unwrap().is_empty());

        let merged = extend_alias_table(&base, &train, ExtensionMode::Merged);
        let costa = alias_lookup(&merged, "costa", 5).unwrap();
        assert_eq!(costa.len(), 2);
        assert!((costa[0].score - 0.5).abs() < 1e-12);
        // Single-token spans are not counted twice.
        assert_eq!(merged.counts["costa"]["Q2"], 1);
    }

    #[test]
    fn bm25_two_titles() {
        let idx = build_bm25(&catalog(&[("A", "alpha"), ("B", "beta")]), Bm25Params::default());
        assert_eq!(idx.len(), 2);
        assert!((idx.avgdl - 1.0).abs() < 1e-12);
        let hits = bm25_search(&idx, "alpha", 10).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entity_id, "A");
        assert!((hits[0].score - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(bm25_search(&idx, "gamma", 10).unwrap().is_empty());
    }

    #[test]
    fn bm25_ties_and_degenerate_titles() {
        let cat = catalog(&[("B", "red house"), ("A", "red house"), ("C", "--")]);
        let idx = build_bm25(&cat, Bm25Params::default());
        assert_eq!(idx.doc_lengths, vec![2, 2, 0]);
        let hits = bm25_search(&idx, "red", 10).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].entity_id, "A");
        assert_eq!(hits[0].score, hits[1].score);
        assert_eq!(build_bm25(&cat, Bm25Params::default()), idx);
    }
}
