//! Timed evaluation and latency benchmarks. Everything here runs on the
//! calling thread.

use std::time::Instant;

use deer_core::corpus::{EntityCatalog, MentionExample};
use deer_core::eval::{check_gold, latency_summary, recalls, Retriever};
use deer_core::index::{AnnIndex, Hit, SearchParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::report::{BenchRow, ReportRow};

/// Recall at each of `ks` plus per-query wall time.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub name: String,
    pub recalls: Vec<(usize, f64)>,
    pub rankings: Vec<Vec<String>>,
    pub latencies_ms: Vec<f64>,
}

impl Evaluation {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    /// Row for the comparison report; needs recall at 1 and 100.
    pub fn report_row(&self) -> ReportRow {
        let (mean, p50, p99) = latency_summary(&self.latencies_ms);
        ReportRow {
            name: self.name.clone(),
            r_at_1: self.recall(1).unwrap_or(f64::NAN),
            r_at_100: self.recall(100).unwrap_or(f64::NAN),
            mean_ms: mean,
            p50_ms: p50,
            p99_ms: p99,
            queries: self.rankings.len(),
        }
    }
}

/// One retrieval pass at `max(ks)`; recalls are read off the same rankings.
pub fn evaluate_retriever(
    retriever: &dyn Retriever,
    catalog: &EntityCatalog,
    examples: &[MentionExample],
    ks: &[usize],
) -> Result<Evaluation> {
    check_gold(catalog, examples)?;
    let max_k = ks.iter().copied().max().unwrap_or(1).max(1);
    let mut rankings = Vec::with_capacity(examples.len());
    let mut latencies_ms = Vec::with_capacity(examples.len());
    for ex in examples {
        let t = Instant::now();
        let r = retriever.retrieve(ex, max_k)?;
        latencies_ms.push(t.elapsed().as_secs_f64() * 1e3);
        rankings.push(r);
    }
    Ok(Evaluation {
        name: retriever.name().to_string(),
        recalls: recalls(&rankings, examples, ks)?,
        rankings,
        latencies_ms,
    })
}

/// `(mean, p50, p99)` in milliseconds over `repeats` passes through
/// `queries`, after `warmup` untimed calls.
pub fn latency_benchmark<Q>(
    mut run: impl FnMut(&Q) -> Result<()>,
    queries: &[Q],
    warmup: usize,
    repeats: usize,
) -> Result<(f64, f64, f64)> {
    for q in queries.iter().cycle().take(if queries.is_empty() { 0 } else { warmup }) {
        run(q)?;
    }
    let mut samples = Vec::with_capacity(queries.len() * repeats);
    for _ in 0..repeats {
        for q in queries {
            let t = Instant::now();
            run(q)?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(latency_summary(&samples))
}

/// Standard normal rows scaled to unit length.
pub fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            // Box-Muller, one value per draw pair.
            let v: Vec<f64> = (0..dim)
                .map(|_| {
                    let u: f64 = 1.0 - rng.gen::<f64>();
                    let w: f64 = rng.gen();
                    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * w).cos()
                })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.iter().map(|x| (x / norm) as f32).collect();
            }
        })
        .collect()
}

/// Mean fraction of the reference top-k found in the candidate top-k.
pub fn overlap(reference: &[Vec<Hit>], candidate: &[Vec<Hit>]) -> f64 {
    let per: Vec<f64> = reference
        .iter()
        .zip(candidate)
        .map(|(r, c)| {
            if r.is_empty() {
                return 1.0;
            }
            let found = c.iter().filter(|h| r.iter().any(|g| g.index == h.index)).count();
            found as f64 / r.len() as f64
        })
        .collect();
    per.iter().sum::<f64>() / per.len().max(1) as f64
}

/// Times `index` on `queries` and scores its top-`k` against brute force.
pub fn bench_index(
    method: &str,
    index: &AnnIndex,
    params: SearchParams,
    queries: &[Vec<f32>],
    reference: &[Vec<Hit>],
    k: usize,
    warmup: usize,
    repeats: usize,
) -> Result<BenchRow> {
    let results = queries
        .iter()
        .map(|q| index.search(q, k, params))
        .collect::<deer_core::Result<Vec<_>>>()?;
    let (mean, p50, p99) = latency_benchmark(
        |q: &Vec<f32>| {
            std::hint::black_box(index.search(q, k, params)?);
            Ok(())
        },
        queries,
        warmup,
        repeats,
    )?;
    Ok(BenchRow {
        method: method.to_string(),
        mean_ms: mean,
        p50_ms: p50,
        p99_ms: p99,
        recall_overlap: overlap(reference, &results),
    })
}
