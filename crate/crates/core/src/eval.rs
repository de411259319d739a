//! Recall@k and a uniform retrieval contract over DEER and the baselines.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::baselines::{alias_lookup, bm25_search, AliasTable, Bm25Index};
use crate::corpus::{EntityCatalog, MentionExample};
use crate::features::{entity_features, NgramVocabulary};
use crate::index::{AnnIndex, SearchParams};
use crate::model::{EncodedEntity, EncodedMention, ModelParams};
use crate::{Error, Result};

pub const DEFAULT_KS: [usize; 2] = [1, 100];

/// Returns at most `k` distinct entity ids, best first.
pub trait Retriever {
    fn name(&self) -> &str;
    fn retrieve(&self, example: &MentionExample, k: usize) -> Result<Vec<String>>;
}

/// Fraction of queries whose gold id is among the first `k` of its ranking.
pub fn recall_at_k<S: AsRef<str>>(rankings: &[Vec<S>], gold: &[S], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if rankings.len() != gold.len() {
        return Err(Error::ShapeMismatch("rankings and gold differ in count".into()));
    }
    if gold.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let hits = rankings
        .iter()
        .zip(gold)
        .filter(|(r, g)| r.iter().take(k).any(|id| id.as_ref() == g.as_ref()))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Every gold entity must be in the catalog.
pub fn check_gold(catalog: &EntityCatalog, examples: &[MentionExample]) -> Result<()> {
    match examples
        .iter()
        .find(|ex| catalog.position(&ex.gold_entity_id).is_none())
    {
        Some(ex) => Err(Error::UnknownEntity(ex.gold_entity_id.clone())),
        None => Ok(()),
    }
}

/// Mean, median and 99th percentile (nearest rank).
pub fn latency_summary(samples: &[f64]) -> (f64, f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let pick = |q: f64| {
        let rank = libm::ceil(q * s.len() as f64) as usize;
        s[rank.clamp(1, s.len()) - 1]
    };
    (mean, pick(0.5), pick(0.99))
}

fn span_text(example: &MentionExample) -> String {
    example.features.span.tokens.join(" ")
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::InvalidConfig("k must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Alias lookup on the span text (`AT-Prior`, or `AT-Ext` for an
/// extended table).
pub struct AliasRetriever {
    pub name: String,
    pub table: AliasTable,
}

impl Retriever for AliasRetriever {
    fn name(&self) -> &str {
        &self.name
    }

    fn retrieve(&self, example: &MentionExample, k: usize) -> Result<Vec<String>> {
        Ok(alias_lookup(&self.table, &span_text(example), k)?
            .into_iter()
            .map(|c| c.entity_id)
            .collect())
    }
}

pub struct Bm25Retriever {
    pub index: Bm25Index,
}

impl Retriever for Bm25Retriever {
    fn name(&self) -> &str {
        "BM25"
    }

    fn retrieve(&self, example: &MentionExample, k: usize) -> Result<Vec<String>> {
        Ok(bm25_search(&self.index, &span_text(example), k)?
            .into_iter()
            .map(|c| c.entity_id)
            .collect())
    }
}

/// Entity tower over the whole catalog, in catalog order.
pub fn encode_catalog(params: &ModelParams, vocab: &NgramVocabulary, catalog: &EntityCatalog) -> Vec<Vec<f32>> {
    catalog
        .records()
        .iter()
        .map(|r| {
            let e = EncodedEntity::new(&entity_features(r), vocab, params.dims.category_rows);
            params.encode_entity(&e).iter().map(|&x| x as f32).collect()
        })
        .collect()
}

/// Mention tower followed by a search of the entity index.
pub struct DeerRetriever<'a> {
    pub name: String,
    pub params: &'a ModelParams,
    pub vocab: &'a NgramVocabulary,
    pub index: &'a AnnIndex,
    pub search: SearchParams,
}

impl DeerRetriever<'_> {
    pub fn encode(&self, example: &MentionExample) -> Vec<f32> {
        let m = EncodedMention::new(&example.features, self.vocab);
        self.params.encode_mention(&m).iter().map(|&x| x as f32).collect()
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<String>> {
        Ok(self
            .index
            .search(query, k, self.search)?
            .into_iter()
            .map(|h| self.index.store.id(h.index).to_string())
            .collect())
    }
}

impl Retriever for DeerRetriever<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn retrieve(&self, example: &MentionExample, k: usize) -> Result<Vec<String>> {
        check_k(k)?;
        match self.search(&self.encode(example), k) {
            // A mention the tower maps to zero has no direction to search.
            Err(Error::ZeroVector(_)) => Ok(Vec::new()),
            other => other,
        }
    }
}

/// Returns the gold entity first. Useful as a harness check.
pub struct OracleRetriever;

impl Retriever for OracleRetriever {
    fn name(&self) -> &str {
        "oracle"
    }

    fn retrieve(&self, example: &MentionExample, k: usize) -> Result<Vec<String>> {
        check_k(k)?;
        Ok(alloc::vec![example.gold_entity_id.clone()])
    }
}

/// Recall of `rankings` at each of `ks`, after checking the contract
/// (at most `k` ids, no duplicates).
pub fn recalls(rankings: &[Vec<String>], examples: &[MentionExample], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    for r in rankings {
        let distinct: BTreeSet<&String> = r.iter().collect();
        if r.len() > max_k || distinct.len() != r.len() {
            return Err(Error::ShapeMismatch("retriever broke the ranking contract".into()));
        }
    }
    let gold: Vec<String> = examples.iter().map(|e| e.gold_entity_id.clone()).collect();
    ks.iter()
        .map(|&k| Ok((k, recall_at_k(rankings, &gold, k)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn recall_counts() {
        let mut far: Vec<String> = (0..100).map(|i| alloc::format!("x{i}")).collect();
        far.push("g".into());
        let mut third = s(&["a", "b", "g"]);
        third.extend((0..97).map(|i| alloc::format!("y{i}")));
        let mut hundredth = far.clone();
        hundredth.remove(0);
        // Gold at ranks 1, 3, 101 and absent.
        let mut rankings = vec![s(&["g"]), third, far, s(&["a"])];
        let gold = s(&["g", "g", "g", "g"]);
        assert_eq!(recall_at_k(&rankings, &gold, 100).unwrap(), 0.5);
        assert_eq!(recall_at_k(&rankings, &gold, 1).unwrap(), 0.25);
        assert_eq!(recall_at_k(&rankings, &gold, 101).unwrap(), 0.75);
        // Gold at ranks 1, 3, 100 and absent.
        rankings[2] = hundredth;
        assert_eq!(recall_at_k(&rankings, &gold, 100).unwrap(), 0.75);
        assert_eq!(recall_at_k::<String>(&[], &[], 1), Err(Error::EmptyQuerySet));
        assert!(recall_at_k(&rankings, &gold, 0).is_err());
    }

    #[test]
    fn latency_order_statistics() {
        assert_eq!(latency_summary(&[2.5]), (2.5, 2.5, 2.5));
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let (mean, p50, p99) = latency_summary(&v);
        assert_eq!((mean, p50, p99), (50.5, 50.0, 99.0));
    }
}
