//! Hard-negative mining: encode the corpus with the current model, retrieve
//! the nearest entities of every training mention, keep the ones ranked
//! above the gold entity, and resume training with a logistic task on them.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::linalg::{dot, norm};
use crate::model::{ModelParams, DEGENERATE_NORM};
use crate::training::{auc, resume_training, HardPair, TrainConfig, TrainingData};
use crate::{Error, Result};

pub const DEFAULT_NEIGHBORS: usize = 10;

/// Unit-normalized encodings of a mention set and the whole catalog.
/// Degenerate encodings are stored as zero rows and score 0 against all.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingSnapshot {
    pub dim: usize,
    pub mentions: Vec<Vec<f64>>,
    pub entities: Vec<Vec<f64>>,
    pub mention_gold: Vec<usize>,
    /// Position of every entity when ids are sorted ascending.
    pub id_rank: Vec<usize>,
}

fn unit_or_zero(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n < DEGENERATE_NORM {
        alloc::vec![0.0; v.len()]
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

/// Rank of each id in ascending order.
pub fn id_ranks<S: AsRef<str>>(ids: &[S]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].as_ref().cmp(ids[b].as_ref()));
    let mut rank = alloc::vec![0; ids.len()];
    for (r, i) in order.into_iter().enumerate() {
        rank[i] = r;
    }
    rank
}

fn snapshot(params: &ModelParams, data: &TrainingData, heldout: bool) -> EncodingSnapshot {
    let (mentions, gold) = if heldout {
        (&data.heldout, &data.heldout_gold)
    } else {
        (&data.train, &data.train_gold)
    };
    EncodingSnapshot {
        dim: params.dims.encode_dim,
        mentions: mentions.iter().map(|m| unit_or_zero(params.encode_mention(m).0)).collect(),
        entities: data.entities.iter().map(|e| unit_or_zero(params.encode_entity(e).0)).collect(),
        mention_gold: gold.clone(),
        id_rank: id_ranks(&data.entity_ids),
    }
}

/// Training mentions against the full catalog.
pub fn snapshot_encodings(params: &ModelParams, data: &TrainingData) -> EncodingSnapshot {
    snapshot(params, data, false)
}

/// Heldout mentions against the full catalog.
pub fn snapshot_heldout(params: &ModelParams, data: &TrainingData) -> EncodingSnapshot {
    snapshot(params, data, true)
}

impl EncodingSnapshot {
    pub fn score(&self, mention: usize, entity: usize) -> f64 {
        dot(&self.mentions[mention], &self.entities[entity])
    }

    /// Top `k` entities by cosine, ties to the smaller id.
    pub fn top_k(&self, mention: usize, k: usize) -> Vec<usize> {
        let better = |a: (f64, usize), b: (f64, usize)| {
            a.0 > b.0 || (a.0 == b.0 && self.id_rank[a.1] < self.id_rank[b.1])
        };
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for e in 0..self.entities.len() {
            let cand = (self.score(mention, e), e);
            if top.len() == k && !better(cand, top[k - 1]) {
                continue;
            }
            let at = top.iter().position(|&t| better(cand, t)).unwrap_or(top.len());
            top.insert(at, cand);
            top.truncate(k);
        }
        top.into_iter().map(|(_, e)| e).collect()
    }

    /// Fraction of mentions whose gold entity is among the top `k`.
    pub fn recall_at(&self, k: usize) -> f64 {
        if self.mentions.is_empty() {
            return f64::NAN;
        }
        let hits = (0..self.mentions.len())
            .filter(|&m| self.top_k(m, k).contains(&self.mention_gold[m]))
            .count();
        hits as f64 / self.mentions.len() as f64
    }
}

/// Every entity retrieved strictly above the gold entity within the top
/// `k`; all `k` when gold is not retrieved.
pub fn mine_hard_negatives(snapshot: &EncodingSnapshot, k: usize) -> Result<Vec<HardPair>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut out = Vec::new();
    for m in 0..snapshot.mentions.len() {
        let gold = snapshot.mention_gold[m];
        for e in snapshot.top_k(m, k).into_iter().take_while(|&e| e != gold) {
            out.push(HardPair {
                mention: m,
                entity: e,
                label: false,
            });
        }
    }
    Ok(out)
}

/// Deduplicated negatives collected across rounds. Positives are not
/// stored; [`HardPairPool::classification_task`] adds one per mined
/// mention.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HardPairPool {
    pairs: Vec<HardPair>,
    seen: BTreeSet<(usize, usize)>,
    round_counts: Vec<usize>,
}

impl HardPairPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pairs(&self) -> &[HardPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// New pairs added in each call to [`HardPairPool::append`].
    pub fn round_counts(&self) -> &[usize] {
        &self.round_counts
    }

    /// Appends unseen negatives and returns how many were new.
    pub fn append(&mut self, mined: &[HardPair]) -> usize {
        let before = self.pairs.len();
        for p in mined {
            debug_assert!(!p.label);
            if self.seen.insert((p.mention, p.entity)) {
                self.pairs.push(*p);
            }
        }
        let added = self.pairs.len() - before;
        self.round_counts.push(added);
        added
    }

    /// The gold pair of every mention with a pooled negative, then the
    /// negatives; empty when nothing was mined.
    pub fn classification_task(&self, data: &TrainingData) -> Vec<HardPair> {
        let mentions: BTreeSet<usize> = self.pairs.iter().map(|p| p.mention).collect();
        let mut task: Vec<HardPair> = mentions
            .into_iter()
            .map(|mention| HardPair {
                mention,
                entity: data.train_gold[mention],
                label: true,
            })
            .collect();
        task.extend_from_slice(&self.pairs);
        task
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    pub neighbors: usize,
    pub rounds: usize,
    /// Training budget of each round.
    pub train: TrainConfig,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            rounds: 3,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub new_negatives: usize,
    pub pool_size: usize,
    /// Heldout full-catalog recall@1 before and after the round.
    pub heldout_r1_before: f64,
    pub heldout_r1: f64,
    /// AUC over heldout pairs mined with the pre-round model; NaN when
    /// that yields a single class.
    pub auc_before: f64,
    pub auc: f64,
    pub steps: u64,
}

fn heldout_pair_auc(params: &ModelParams, data: &TrainingData, pairs: &[HardPair]) -> f64 {
    let snap = snapshot_heldout(params, data);
    let scores: Vec<f64> = pairs.iter().map(|p| snap.score(p.mention, p.entity)).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.label).collect();
    auc(&scores, &labels).unwrap_or(f64::NAN)
}

fn heldout_pairs(snap: &EncodingSnapshot, k: usize) -> Result<Vec<HardPair>> {
    let mut pairs = mine_hard_negatives(snap, k)?;
    pairs.extend(snap.mention_gold.iter().enumerate().map(|(mention, &entity)| HardPair {
        mention,
        entity,
        label: true,
    }));
    Ok(pairs)
}

/// Mines with the current model, grows the pool and resumes multi-task
/// training.
pub fn mining_round(
    params: ModelParams,
    data: &TrainingData,
    pool: &mut HardPairPool,
    config: &MiningConfig,
    round: usize,
    seed: u64,
) -> Result<(ModelParams, RoundMetrics)> {
    let mined = mine_hard_negatives(&snapshot_encodings(&params, data), config.neighbors)?;
    let new_negatives = pool.append(&mined);

    let before = snapshot_heldout(&params, data);
    let heldout_r1_before = before.recall_at(1);
    let probe = heldout_pairs(&before, config.neighbors)?;
    let auc_before = heldout_pair_auc(&params, data, &probe);

    let task = pool.classification_task(data);
    let round_seed = seed ^ (round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let (params, log) = resume_training(data, params, &config.train, &task, round_seed)?;

    let metrics = RoundMetrics {
        round,
        new_negatives,
        pool_size: pool.len(),
        heldout_r1_before,
        heldout_r1: snapshot_heldout(&params, data).recall_at(1),
        auc_before,
        auc: heldout_pair_auc(&params, data, &probe),
        steps: log.steps,
    };
    Ok((params, metrics))
}

/// Round 0 holds the starting model's metrics; rounds `1..=n` follow.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningReport {
    pub rounds: Vec<RoundMetrics>,
}

impl MiningReport {
    pub fn curve(&self) -> Vec<(usize, f64)> {
        self.rounds.iter().map(|r| (r.round, r.heldout_r1)).collect()
    }
}

pub fn run_iterative_mining(
    mut params: ModelParams,
    data: &TrainingData,
    config: &MiningConfig,
    seed: u64,
) -> Result<(ModelParams, HardPairPool, MiningReport)> {
    if config.rounds == 0 {
        return Err(Error::InvalidConfig("rounds must be at least 1".into()));
    }
    let start = snapshot_heldout(&params, data);
    let r1 = start.recall_at(1);
    let start_auc = heldout_pair_auc(&params, data, &heldout_pairs(&start, config.neighbors)?);
    let mut rounds = alloc::vec![RoundMetrics {
        round: 0,
        new_negatives: 0,
        pool_size: 0,
        heldout_r1_before: r1,
        heldout_r1: r1,
        auc_before: start_auc,
        auc: start_auc,
        steps: 0,
    }];
    let mut pool = HardPairPool::new();
    for round in 1..=config.rounds {
        let (next, metrics) = mining_round(params, data, &mut pool, config, round, seed)?;
        params = next;
        rounds.push(metrics);
    }
    Ok((params, pool, MiningReport { rounds }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use alloc::vec;

    fn snap(mentions: Vec<Vec<f64>>, entities: Vec<Vec<f64>>, gold: Vec<usize>) -> EncodingSnapshot {
        let ids: Vec<String> = (0..entities.len()).map(|i| alloc::format!("E{i:03}")).collect();
        EncodingSnapshot {
            dim: entities[0].len(),
            mentions: mentions.into_iter().map(unit_or_zero).collect(),
            entities: entities.into_iter().map(unit_or_zero).collect(),
            mention_gold: gold,
            id_rank: id_ranks(&ids),
        }
    }

    #[test]
    fn converged_snapshot_mines_nothing() {
        let s = snap(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1],
        );
        assert!(mine_hard_negatives(&s, 10).unwrap().is_empty());
        assert!(mine_hard_negatives(&s, 0).is_err());
    }

    #[test]
    fn one_entity_above_gold() {
        let s = snap(
            vec![vec![1.0, 0.1]],
            vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.5]],
            vec![2],
        );
        let mined = mine_hard_negatives(&s, 10).unwrap();
        assert_eq!(mined, vec![HardPair { mention: 0, entity: 1, label: false }]);
    }

    #[test]
    fn ties_break_by_id() {
        let ids = ["b", "a", "c"];
        assert_eq!(id_ranks(&ids), vec![1, 0, 2]);
        let mut s = snap(vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]; 3], vec![2]);
        s.id_rank = id_ranks(&ids);
        assert_eq!(s.top_k(0, 3), vec![1, 0, 2]);
        let mined = mine_hard_negatives(&s, 10).unwrap();
        assert_eq!(mined.iter().map(|p| p.entity).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn pool_deduplicates() {
        let mut pool = HardPairPool::new();
        let p = |m, e| HardPair { mention: m, entity: e, label: false };
        assert_eq!(pool.append(&[p(0, 1), p(0, 2)]), 2);
        assert_eq!(pool.append(&[p(0, 1), p(1, 1)]), 1);
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.round_counts(), &[2, 1]);
    }
}
