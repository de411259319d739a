//! End-to-end acceptance report. Prints one `PASS` or `FAIL` line per
//! criterion. With `DEER_ACCEPTANCE_STRICT=1` any failure makes the target
//! exit non-zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::Instant;

use deer::bench::{bench_index, evaluate_retriever, random_unit_vectors};
use deer_core::baselines::{
    alias_lookup, bm25_search, build_alias_table, build_bm25, Bm25Params, MAX_CANDIDATES,
};
use deer_core::corpus::{
    generate_synthetic, mention_examples, split_examples, Anchor, AnnotatedDocument, EntityCatalog,
    EntityRecord, MentionExample, SyntheticConfig,
};
use deer_core::eval::{encode_catalog, AliasRetriever, DeerRetriever, Retriever};
use deer_core::features::{build_corpus_vocabulary, mention_features, tokenize, NgramVocabulary};
use deer_core::index::{
    build_ah, build_brute, build_tree_ah, search_ah, search_brute, AnnIndex, AnnKind, Hit,
    SearchParams, TreeAhIndex,
};
use deer_core::mining::{run_iterative_mining, MiningConfig};
use deer_core::model::{ModelConfig, ModelDims, ModelParams, SimilarityMatrix};
use deer_core::training::{
    logistic_loss_and_grad, random_gradcheck, softmax_loss_and_grad, train, TrainConfig,
    TrainingData,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute force ignores both knobs.
const EXACT: SearchParams = SearchParams {
    probes: 1,
    reorder: 0,
};

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &'static str, pass: bool, detail: String) -> Line {
    let l = Line {
        id,
        name,
        pass,
        detail,
    };
    println!(
        "{} [{}] {}: {}",
        if l.pass { "PASS" } else { "FAIL" },
        l.id,
        l.name,
        l.detail
    );
    l
}

/// A trained model with everything needed to query it.
struct Trained {
    catalog: EntityCatalog,
    vocab: NgramVocabulary,
    params: ModelParams,
    train: Vec<MentionExample>,
    heldout: Vec<MentionExample>,
    inbatch_r1: f64,
    steps: u64,
    seconds: f64,
}

fn train_synthetic(corpus: &SyntheticConfig, config: &TrainConfig, seed: u64) -> Trained {
    let (catalog, docs) = generate_synthetic(corpus, seed).unwrap();
    let examples = mention_examples(&docs, &catalog).unwrap();
    let split = split_examples(examples, 0.1, seed).unwrap();
    let model = ModelConfig::default();
    let vocab = build_corpus_vocabulary(&split.train, catalog.records(), 200_000, 1_000).unwrap();
    let data = TrainingData::prepare(&split, &catalog, &vocab, model.category_rows).unwrap();
    let t = Instant::now();
    let (params, log) = train(&data, ModelDims::new(&model, &vocab), config, seed).unwrap();
    Trained {
        catalog,
        vocab,
        params,
        train: split.train,
        heldout: split.heldout,
        inbatch_r1: log.final_r1,
        steps: log.steps,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn brute_index(t: &Trained) -> AnnIndex {
    let enc = encode_catalog(&t.params, &t.vocab, &t.catalog);
    AnnIndex {
        store: build_brute(&enc, t.catalog.ids().map(String::from).collect()).unwrap(),
        kind: AnnKind::Brute,
    }
}

/// Fraction of mentions whose span is shared with another entity.
fn ambiguous_fraction(examples: &[MentionExample]) -> f64 {
    let mut by_span: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for ex in examples {
        by_span
            .entry(ex.features.span.tokens.join(" "))
            .or_default()
            .insert(&ex.gold_entity_id);
    }
    let amb = examples
        .iter()
        .filter(|ex| by_span[&ex.features.span.tokens.join(" ")].len() > 1)
        .count();
    amb as f64 / examples.len() as f64
}

fn gradient_check() -> Line {
    let t = Instant::now();
    let rep = random_gradcheck(8, 240, 1e-4, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let unprobed = rep.per_tensor.iter().filter(|(_, e)| e.is_none()).count();
    let pass =
        rep.max_relative_error < 1e-4 && rep.coordinates >= 200 && unprobed == 0 && secs < 60.0;
    report(
        1,
        "gradient correctness",
        pass,
        format!(
            "max rel err {:.2e} over {} coordinates, {} tensors, {} unprobed, {} kinks skipped, {secs:.2} s",
            rep.max_relative_error,
            rep.coordinates,
            rep.per_tensor.len(),
            unprobed,
            rep.skipped_kinks
        ),
    )
}

fn loss_identities() -> Line {
    let mut worst_uniform: f64 = 0.0;
    for b in [2usize, 4, 100] {
        let sims = SimilarityMatrix::from_rows(vec![vec![0.3; b]; b]).unwrap();
        let l = softmax_loss_and_grad(&sims, 7.0).unwrap();
        worst_uniform = worst_uniform.max((l.loss - (b as f64).ln()).abs());
    }
    let mut worst_logistic: f64 = 0.0;
    for label in [true, false] {
        let l = logistic_loss_and_grad(0.0, label, 1.0, 0.0);
        worst_logistic = worst_logistic.max((l.loss - std::f64::consts::LN_2).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_row: f64 = 0.0;
    for b in [2usize, 5, 31] {
        let rows = (0..b)
            .map(|_| (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let l = softmax_loss_and_grad(
            &SimilarityMatrix::from_rows(rows).unwrap(),
            rng.gen_range(1.0..20.0),
        )
        .unwrap();
        for row in l.d_sims.chunks(b) {
            worst_row = worst_row.max(row.iter().sum::<f64>().abs());
        }
    }
    let pass = worst_uniform <= 1e-6 && worst_logistic <= 1e-9 && worst_row <= 1e-9;
    report(
        2,
        "loss identities",
        pass,
        format!("|L - ln B| {worst_uniform:.1e}, |L_h - ln 2| {worst_logistic:.1e}, max |row grad sum| {worst_row:.1e}"),
    )
}

fn end_to_end(t: &Trained, ambiguous: f64) -> Line {
    let mentions = t.train.len() + t.heldout.len();
    let pass = t.inbatch_r1 >= 0.95 && t.steps <= 20_000 && t.seconds < 600.0 && ambiguous >= 0.3;
    report(
        3,
        "end-to-end learning",
        pass,
        format!(
            "{} entities, {mentions} mentions, {:.1}% ambiguous; heldout in-batch R@1 {:.4} after {} steps, {:.1} s",
            t.catalog.len(),
            ambiguous * 100.0,
            t.inbatch_r1,
            t.steps,
            t.seconds
        ),
    )
}

fn deer_vs_alias(models: &[(u64, &Trained)]) -> Line {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, t) in models {
        let index = brute_index(t);
        let deer = DeerRetriever {
            name: "DEER".into(),
            params: &t.params,
            vocab: &t.vocab,
            index: &index,
            search: EXACT,
        };
        let prior = AliasRetriever {
            name: "AT-Prior".into(),
            table: build_alias_table(&t.train),
        };
        let d = evaluate_retriever(&deer, &t.catalog, &t.heldout, &[1])
            .unwrap()
            .recall(1)
            .unwrap();
        let a = evaluate_retriever(&prior, &t.catalog, &t.heldout, &[1])
            .unwrap()
            .recall(1)
            .unwrap();
        pass &= d - a >= 0.10;
        parts.push(format!("seed {seed}: DEER {d:.4} vs AT-Prior {a:.4}"));
    }
    report(4, "beats the alias table", pass, parts.join("; "))
}

/// Larger catalog with every span ambiguous, trained with batches that
/// cover only 5% of it.
fn mining_corpus() -> (SyntheticConfig, TrainConfig, MiningConfig) {
    let corpus = SyntheticConfig {
        entities: 1000,
        families: 100,
        mentions_per_entity: 10,
        ambiguous_fraction: 1.0,
        ..SyntheticConfig::default()
    };
    let base = TrainConfig {
        batch_size: 50,
        max_steps: 10_000,
        patience: 0,
        ..TrainConfig::default()
    };
    let mining = MiningConfig {
        rounds: 3,
        train: TrainConfig {
            max_steps: 4_000,
            ..base.clone()
        },
        ..MiningConfig::default()
    };
    (corpus, base, mining)
}

fn mining_lift() -> Line {
    let (corpus, base, mining) = mining_corpus();
    let seed = 1;
    let (catalog, docs) = generate_synthetic(&corpus, seed).unwrap();
    let split = split_examples(mention_examples(&docs, &catalog).unwrap(), 0.1, seed).unwrap();
    let model = ModelConfig::default();
    let vocab = build_corpus_vocabulary(&split.train, catalog.records(), 200_000, 1_000).unwrap();
    let data = TrainingData::prepare(&split, &catalog, &vocab, model.category_rows).unwrap();
    let (params, _) = train(&data, ModelDims::new(&model, &vocab), &base, seed).unwrap();
    let (_, _, rep) = run_iterative_mining(params, &data, &mining, seed).unwrap();
    let r = &rep.rounds;
    let lift = r[1].heldout_r1 - r[0].heldout_r1;
    let counts: Vec<usize> = r[1..].iter().map(|m| m.new_negatives).collect();
    let non_increasing = counts.windows(2).all(|w| w[1] <= w[0]);
    let curve: Vec<String> = r.iter().map(|m| format!("{:.3}", m.heldout_r1)).collect();
    report(
        5,
        "mining lift",
        lift >= 0.02 && non_increasing,
        format!(
            "heldout R@1 {} by round; round 1 lift {:+.1} points; new negatives {counts:?}",
            curve.join(" -> "),
            lift * 100.0
        ),
    )
}

struct Timed {
    mean_ms: f64,
    overlap: f64,
}

fn timed(
    index: &AnnIndex,
    params: SearchParams,
    queries: &[Vec<f32>],
    reference: &[Vec<Hit>],
    k: usize,
) -> Timed {
    let row = bench_index("", index, params, queries, reference, k, 10, 1).unwrap();
    Timed {
        mean_ms: row.mean_ms,
        overlap: row.recall_overlap,
    }
}

/// Quantizer shape and rescoring depth for the fidelity/speed check.
const AH_SUBSPACES: usize = 32;
const AH_CENTROIDS: usize = 16;
const AH_REORDER: usize = 200;
const TREE_PARTITIONS: usize = 100;
const TREE_PROBES: usize = 5;
const TREE_REORDER: usize = 500;

/// Fraction of the true top-k that lives in the `probes` partitions the
/// tree would scan: what exact scoring of those partitions could find.
fn probed_ceiling(tree: &TreeAhIndex, queries: &[Vec<f32>], truth: &[Vec<Hit>], probes: usize) -> f64 {
    let mut total = 0.0;
    for (q, t) in queries.iter().zip(truth) {
        let mut order: Vec<(f32, usize)> = tree
            .centroids
            .chunks_exact(tree.dim)
            .enumerate()
            .map(|(p, c)| (c.iter().zip(q).map(|(a, b)| a * b).sum(), p))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let scanned: BTreeSet<u32> = order[..probes]
            .iter()
            .flat_map(|&(_, p)| tree.partitions[p].members.iter().copied())
            .collect();
        total += t.iter().filter(|h| scanned.contains(&(h.index as u32))).count() as f64 / t.len() as f64;
    }
    total / queries.len() as f64
}

fn ann() -> Line {
    let (n, dim, nq) = (100_000, 64, 200);
    let data = random_unit_vectors(n, dim, 11);
    let queries = random_unit_vectors(nq, dim, 12);
    let ids: Vec<String> = (0..n).map(|i| format!("v{i:06}")).collect();
    let store = build_brute(&data, ids).unwrap();
    let brute = AnnIndex {
        store: store.clone(),
        kind: AnnKind::Brute,
    };
    let ref10: Vec<Vec<Hit>> = queries
        .iter()
        .map(|q| search_brute(&store, q, 10).unwrap())
        .collect();
    let ref100: Vec<Vec<Hit>> = queries
        .iter()
        .map(|q| search_brute(&store, q, 100).unwrap())
        .collect();
    let b10 = timed(&brute, EXACT, &queries, &ref10, 10);
    let b100 = timed(&brute, EXACT, &queries, &ref100, 100);

    let ah = AnnIndex {
        kind: AnnKind::Ah(build_ah(&store, AH_SUBSPACES, AH_CENTROIDS, 1).unwrap()),
        store: store.clone(),
    };
    let ah_raw = timed(&ah, EXACT, &queries, &ref10, 10);
    let ah_re = timed(
        &ah,
        SearchParams {
            probes: 1,
            reorder: AH_REORDER,
        },
        &queries,
        &ref10,
        10,
    );

    let tree_index = build_tree_ah(&store, TREE_PARTITIONS, AH_SUBSPACES, AH_CENTROIDS, 1).unwrap();
    let ceiling = probed_ceiling(&tree_index, &queries, &ref100, TREE_PROBES);
    let tree = AnnIndex {
        kind: AnnKind::TreeAh(tree_index),
        store: store.clone(),
    };
    let probe = |probes: usize, reorder: usize| {
        timed(&tree, SearchParams { probes, reorder }, &queries, &ref100, 100)
    };
    let tr = probe(TREE_PROBES, 0);
    let tr_re = probe(TREE_PROBES, TREE_REORDER);
    let sweep: Vec<f64> = [1, 2, 5, 10, 20, 50, TREE_PARTITIONS]
        .iter()
        .map(|&p| probe(p, 0).overlap)
        .collect();
    let monotone = sweep.windows(2).all(|w| w[1] >= w[0]);

    // Saturated quantizer on 256 vectors.
    let small = random_unit_vectors(256, 16, 13);
    let small_store = build_brute(&small, (0..256).map(|i| format!("s{i:03}")).collect()).unwrap();
    let sat = build_ah(&small_store, 1, 256, 3).unwrap();
    let mut saturated = true;
    for q in random_unit_vectors(50, 16, 14) {
        let a: Vec<usize> = search_ah(&sat, &q, 256)
            .unwrap()
            .iter()
            .map(|h| h.index)
            .collect();
        let b: Vec<usize> = search_brute(&small_store, &q, 256)
            .unwrap()
            .iter()
            .map(|h| h.index)
            .collect();
        saturated &= a == b;
    }

    let speed = |t: &Timed, base: &Timed| base.mean_ms / t.mean_ms;
    let ah_ok = ah_re.overlap >= 0.9 && speed(&ah_re, &b10) >= 5.0;
    let tree_ok = [&tr, &tr_re]
        .iter()
        .any(|t| t.overlap >= 0.8 && speed(t, &b100) >= 20.0);
    report(
        6,
        "ANN fidelity and speed",
        ah_ok && tree_ok && saturated,
        format!(
            "brute {:.3} ms; AH S={AH_SUBSPACES} C={AH_CENTROIDS}: raw top-10 overlap {:.3} at {:.1}x, \
             reorder {AH_REORDER} overlap {:.3} at {:.1}x [{}]; \
             Tree+AH P={TREE_PARTITIONS} probes={TREE_PROBES}: raw top-100 overlap {:.3} at {:.1}x, \
             reorder {TREE_REORDER} overlap {:.3} at {:.1}x, probed-partition ceiling {ceiling:.3} [{}]; \
             raw overlap at probes 1/2/5/10/20/50/{TREE_PARTITIONS}: {} (monotone: {monotone}); \
             saturated quantizer exact: {saturated}",
            b10.mean_ms,
            ah_raw.overlap,
            speed(&ah_raw, &b10),
            ah_re.overlap,
            speed(&ah_re, &b10),
            if ah_ok { "ok" } else { "short" },
            tr.overlap,
            speed(&tr, &b100),
            tr_re.overlap,
            speed(&tr_re, &b100),
            if tree_ok { "ok" } else { "short" },
            sweep.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>().join("/"),
        ),
    )
}

fn example(span: &str, context: &str, gold: &str) -> MentionExample {
    let span_tokens = tokenize(span);
    let mut tokens = tokenize(context);
    let start = tokens.len() / 2;
    tokens.splice(start..start, span_tokens.iter().cloned());
    let doc = AnnotatedDocument {
        doc_id: "d".into(),
        sentences: vec![(0, tokens.len())],
        anchors: vec![Anchor {
            start,
            end: start + span_tokens.len(),
            entity_id: gold.into(),
        }],
        tokens,
    };
    MentionExample {
        mention_id: format!("{span}/{gold}/{context}"),
        features: mention_features(&doc, &doc.anchors[0]).unwrap(),
        gold_entity_id: gold.into(),
    }
}

/// Independent Okapi BM25 over whitespace tokens.
fn bm25_oracle(titles: &[String], query: &str, k1: f64, b: f64) -> Vec<f64> {
    let docs: Vec<Vec<String>> = titles
        .iter()
        .map(|t| t.split_whitespace().map(str::to_lowercase).collect())
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let q: BTreeSet<String> = query.split_whitespace().map(str::to_lowercase).collect();
    docs.iter()
        .map(|d| {
            q.iter()
                .map(|t| {
                    let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
                    let tf = d.iter().filter(|x| *x == t).count() as f64;
                    let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl))
                })
                .sum()
        })
        .collect()
}

fn baseline_oracles() -> Line {
    // Ten (alias, entity) pairs; priors by hand.
    let pairs = [
        ("jordan", "Q1"),
        ("jordan", "Q1"),
        ("jordan", "Q1"),
        ("jordan", "Q2"),
        ("jordan", "Q3"),
        ("paris", "Q4"),
        ("paris", "Q4"),
        ("paris", "Q5"),
        ("michael jordan", "Q1"),
        ("michael jordan", "Q1"),
    ];
    let train: Vec<MentionExample> = pairs
        .iter()
        .map(|(a, e)| example(a, "the one with", e))
        .collect();
    let table = build_alias_table(&train);
    let expected: [(&str, &[(&str, f64)]); 3] = [
        (
            "jordan",
            &[("Q1", 3.0 / 5.0), ("Q2", 1.0 / 5.0), ("Q3", 1.0 / 5.0)],
        ),
        ("paris", &[("Q4", 2.0 / 3.0), ("Q5", 1.0 / 3.0)]),
        ("michael jordan", &[("Q1", 1.0)]),
    ];
    let mut toy = table.len() == 3;
    for (alias, want) in expected {
        let got = alias_lookup(&table, alias, 100).unwrap();
        toy &= got.len() == want.len()
            && got
                .iter()
                .zip(want)
                .all(|(g, (id, p))| g.entity_id == *id && g.score == *p);
    }

    // 150 entities behind one alias: 30 seen twice, 120 once.
    let mut crowd = Vec::new();
    for i in 0..150 {
        for _ in 0..if i < 30 { 2 } else { 1 } {
            crowd.push(example("smith", "a person named", &format!("E{i:03}")));
        }
    }
    let list = alias_lookup(&build_alias_table(&crowd), "smith", 1000).unwrap();
    let truncation = list.len() == MAX_CANDIDATES
        && list.iter().enumerate().all(|(i, c)| {
            c.entity_id == format!("E{i:03}")
                && c.score == if i < 30 { 2.0 / 180.0 } else { 1.0 / 180.0 }
        });

    // BM25 against the oracle on 20 random titles.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let words = [
        "alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa",
    ];
    let titles: Vec<String> = (0..20)
        .map(|_| {
            (0..rng.gen_range(1..6))
                .map(|_| words[rng.gen_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let catalog = EntityCatalog::new(
        titles
            .iter()
            .enumerate()
            .map(|(i, t)| EntityRecord {
                entity_id: format!("T{i:02}"),
                title: t.clone(),
                paragraph: String::new(),
                categories: vec![],
            })
            .collect(),
    )
    .unwrap();
    let params = Bm25Params::default();
    let index = build_bm25(&catalog, params);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let q: Vec<&str> = (0..rng.gen_range(1..4))
            .map(|_| words[rng.gen_range(0..words.len())])
            .collect();
        let q = q.join(" ");
        let want = bm25_oracle(&titles, &q, params.k1, params.b);
        let got = bm25_search(&index, &q, 20).unwrap();
        for (i, w) in want.iter().enumerate() {
            let id = format!("T{i:02}");
            let g = got
                .iter()
                .find(|s| s.entity_id == id)
                .map_or(0.0, |s| s.score);
            worst = worst.max((g - w).abs());
        }
    }
    report(
        7,
        "baseline oracles",
        toy && truncation && worst <= 1e-9,
        format!("toy priors exact: {toy}; 150-candidate truncation to 100: {truncation}; BM25 max abs diff {worst:.1e}"),
    )
}

/// Topic words listed in a synthetic entity paragraph.
fn topics(record: &EntityRecord) -> Vec<String> {
    let tail = record.paragraph.split("known for ").nth(1).unwrap_or("");
    tail.trim_end_matches('.')
        .split(", ")
        .map(String::from)
        .collect()
}

fn context_sensitivity(t: &Trained, families: usize) -> Line {
    let index = brute_index(t);
    let deer = DeerRetriever {
        name: "DEER".into(),
        params: &t.params,
        vocab: &t.vocab,
        index: &index,
        search: EXACT,
    };
    let records = t.catalog.records();
    let surname = |r: &EntityRecord| r.title.split(' ').nth(1).unwrap().to_lowercase();
    let probe = |r: &EntityRecord| {
        let tp = topics(r);
        let ctx = format!(
            "the season about {} and {} and {} was later",
            tp[0], tp[1], tp[2]
        );
        deer.retrieve(&example(&surname(r), &ctx, &r.entity_id), 1)
            .unwrap()
    };
    // Entities i and i + families share a surname.
    let mut correct_pairs = 0;
    let mut first = String::new();
    for f in 0..families {
        let (a, b) = (&records[f], &records[f + families]);
        let (ta, tb) = (probe(a), probe(b));
        let ok = ta == [a.entity_id.clone()] && tb == [b.entity_id.clone()];
        correct_pairs += ok as usize;
        if f == 0 {
            first = format!(
                "span {:?}: {} -> {:?}, {} -> {:?}",
                surname(a),
                a.entity_id,
                ta,
                b.entity_id,
                tb
            );
        }
    }
    report(
        8,
        "context sensitivity",
        correct_pairs == families,
        format!("{first}; {correct_pairs}/{families} same-span pairs both correct"),
    )
}

fn determinism() -> Line {
    let config = [
        "entities=60",
        "families=12",
        "mentions_per_entity=10",
        "batch_size=20",
        "max_steps=600",
        "mining_rounds=2",
        "mining_steps=200",
        "index_kind=tree",
    ];
    let run_once = |dir: &std::path::Path| {
        for cmd in ["synth", "train", "mine", "build-index"] {
            let mut argv = vec!["deer".to_string(), cmd.into(), "--seed".into(), "17".into()];
            for c in config {
                argv.push("--set".into());
                argv.push(c.into());
            }
            argv.push("--outdir".into());
            argv.push(dir.display().to_string());
            assert_eq!(deer::cli::run(argv), 0, "{cmd}");
        }
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_once(a.path());
    run_once(b.path());
    let files = [
        "kb.jsonl",
        "docs.jsonl",
        "vocab.bin",
        "model.bin",
        "model_mined.bin",
        "index.bin",
    ];
    let differing: Vec<&str> = files
        .iter()
        .filter(|f| fs::read(a.path().join(f)).unwrap() != fs::read(b.path().join(f)).unwrap())
        .copied()
        .collect();
    report(
        9,
        "determinism",
        differing.is_empty(),
        format!(
            "{} artifacts compared, differing: {differing:?}",
            files.len()
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name
    // filter that does not mention this target skips it.
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let strict = std::env::var("DEER_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let started = Instant::now();
    let mut lines = vec![gradient_check(), loss_identities()];

    let corpus = SyntheticConfig::default();
    let primary = train_synthetic(&corpus, &TrainConfig::default(), 1);
    let all: Vec<MentionExample> = primary
        .train
        .iter()
        .chain(&primary.heldout)
        .cloned()
        .collect();
    lines.push(end_to_end(&primary, ambiguous_fraction(&all)));
    let others: Vec<Trained> = [2, 3]
        .iter()
        .map(|&s| train_synthetic(&corpus, &TrainConfig::default(), s))
        .collect();
    let mut models = vec![(1, &primary)];
    models.extend([2u64, 3].into_iter().zip(others.iter()));
    lines.push(deer_vs_alias(&models));
    lines.push(mining_lift());
    lines.push(ann());
    lines.push(baseline_oracles());
    lines.push(context_sensitivity(&primary, corpus.families));
    lines.push(determinism());

    let passed = lines.iter().filter(|l| l.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0} s",
        lines.len(),
        started.elapsed().as_secs_f64()
    );
    if strict && passed < lines.len() {
        std::process::exit(1);
    }
}
