//! The `deer` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use deer_core::baselines::{build_alias_table, build_bm25, extend_alias_table};
use deer_core::corpus::{
    generate_synthetic, mention_examples, split_examples, Anchor, AnnotatedDocument, CorpusSplit, EntityCatalog,
};
use deer_core::eval::{encode_catalog, AliasRetriever, Bm25Retriever, DeerRetriever, Retriever, DEFAULT_KS};
use deer_core::features::{build_corpus_vocabulary, mention_features, tokenize, NgramVocabulary};
use deer_core::index::{
    build_ah, build_brute, build_tree_ah, search_brute, AnnIndex, AnnKind, Hit, SearchParams,
};
use deer_core::mining::run_iterative_mining;
use deer_core::model::{EncodedMention, ModelDims, ModelParams};
use deer_core::training::{random_gradcheck, train, TrainingData};
use serde_json::json;

use crate::bench::{bench_index, evaluate_retriever, random_unit_vectors};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats;
use crate::jsonl;
use crate::report::{self, BenchRow};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "deer", version, about = "Dual-encoder entity retrieval")]
pub struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Same as `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Same as `--set outdir=DIR`.
    #[arg(long, global = true)]
    pub outdir: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the KB and documents files and summarize the split.
    Ingest,
    /// Write a synthetic KB and documents file.
    Synth,
    /// Build the vocabulary and train a model.
    Train,
    /// Iterative hard-negative mining on top of a trained model.
    Mine,
    /// Encode the catalog and build a search index.
    BuildIndex,
    /// Compare DEER against the alias-table and BM25 baselines.
    Evaluate,
    /// Retrieve entities for one mention.
    Query(QueryArgs),
    /// Latency and fidelity of brute, AH and tree search on random vectors.
    Benchmark,
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub span: String,
    /// Text around the mention. When it contains the span, the first
    /// occurrence is the mention; otherwise the span goes in the middle.
    #[arg(long, default_value = "")]
    pub context: String,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Embedding and encoding width.
    #[arg(long, default_value_t = 8)]
    pub dims: usize,
    #[arg(long, default_value_t = 240)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
}

/// Parses `argv`, runs one command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("deer: {e}");
            e.exit_code()
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest => "ingest",
        Command::Synth => "synth",
        Command::Train => "train",
        Command::Mine => "mine",
        Command::BuildIndex => "build-index",
        Command::Evaluate => "evaluate",
        Command::Query(_) => "query",
        Command::Benchmark => "benchmark",
        Command::Gradcheck(_) => "gradcheck",
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.outdir {
        overrides.push(format!("outdir={o}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let seed = config.seed()?;
    let outdir = PathBuf::from(&config.outdir);
    fs::create_dir_all(&outdir).map_err(|e| Error::io(&outdir, e))?;

    let started = Instant::now();
    let mut run = Run {
        config: &config,
        seed,
        outdir: &outdir,
        outputs: Vec::new(),
    };
    let result = match &cli.command {
        Command::Ingest => run.ingest(),
        Command::Synth => run.synth(),
        Command::Train => run.train(),
        Command::Mine => run.mine(),
        Command::BuildIndex => run.build_index(),
        Command::Evaluate => run.evaluate(),
        Command::Query(args) => run.query(args),
        Command::Benchmark => run.benchmark(),
        Command::Gradcheck(args) => run.gradcheck(args),
    };
    let manifest = json!({
        "command": command_name(&cli.command),
        "status": match &result { Ok(()) => "ok".to_string(), Err(e) => e.to_string() },
        "seed": seed,
        "config": config,
        "versions": { "deer": env!("CARGO_PKG_VERSION") },
        "outputs": run.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "wall_seconds": started.elapsed().as_secs_f64(),
    });
    report::write_json_file(&outdir.join("run_manifest.json"), &manifest)?;
    result
}

struct Run<'a> {
    config: &'a RunConfig,
    seed: u64,
    outdir: &'a Path,
    outputs: Vec<PathBuf>,
}

/// Everything derived from the corpus files and the seed.
struct Corpus {
    catalog: EntityCatalog,
    split: CorpusSplit,
}

fn say(line: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line.as_ref());
}

fn numeric(e: deer_core::Error) -> Error {
    match e {
        deer_core::Error::NonFinite(m) => Error::Numeric(m),
        other => Error::Core(other),
    }
}

impl Run<'_> {
    fn out(&mut self, name: &str) -> PathBuf {
        let p = self.outdir.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn record(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    fn corpus(&self) -> Result<Corpus> {
        let catalog = jsonl::load_catalog(&self.config.path("kb", "kb.jsonl"))?;
        let docs = jsonl::load_documents(&self.config.path("docs", "docs.jsonl"))?;
        let examples = mention_examples(&docs, &catalog)?;
        let split = split_examples(examples, self.config.holdout, self.seed)?;
        Ok(Corpus { catalog, split })
    }

    fn data(&self, corpus: &Corpus, vocab: &NgramVocabulary, params: &ModelParams) -> Result<TrainingData> {
        Ok(TrainingData::prepare(&corpus.split, &corpus.catalog, vocab, params.dims.category_rows)?)
    }

    fn load_model(&self, key: &str, default: &str) -> Result<(NgramVocabulary, ModelParams)> {
        let vocab = formats::load_vocab(&self.config.path("vocab", "vocab.bin"))?;
        let path = self.config.path(key, default);
        let params = formats::load_model(&path)?;
        if params.dims.vocab_size != vocab.vocab_size() || params.dims.oov_buckets as u64 != vocab.oov_buckets() {
            return Err(Error::format(path, "model does not match the vocabulary"));
        }
        Ok((vocab, params))
    }

    fn synth(&mut self) -> Result<()> {
        let (catalog, docs) = generate_synthetic(&self.config.synthetic(), self.seed)?;
        let kb = self.config.path("kb", "kb.jsonl");
        let dp = self.config.path("docs", "docs.jsonl");
        jsonl::write_catalog(&kb, &catalog)?;
        jsonl::write_documents(&dp, &docs)?;
        self.record(&kb);
        self.record(&dp);
        let mentions: usize = docs.iter().map(|d| d.anchors.len()).sum();
        say(format!("{} entities, {} documents, {mentions} mentions", catalog.len(), docs.len()));
        Ok(())
    }

    fn ingest(&mut self) -> Result<()> {
        let corpus = self.corpus()?;
        let all = corpus.split.train.iter().chain(&corpus.split.heldout);
        let mut by_span: std::collections::BTreeMap<String, std::collections::BTreeSet<&str>> = Default::default();
        for ex in all.clone() {
            by_span
                .entry(ex.features.span.tokens.join(" "))
                .or_default()
                .insert(&ex.gold_entity_id);
        }
        let total = all.clone().count();
        let ambiguous = all
            .filter(|ex| by_span[&ex.features.span.tokens.join(" ")].len() > 1)
            .count();
        let summary = json!({
            "entities": corpus.catalog.len(),
            "mentions": total,
            "train": corpus.split.train.len(),
            "heldout": corpus.split.heldout.len(),
            "ambiguous_fraction": ambiguous as f64 / total.max(1) as f64,
        });
        let p = self.out("ingest_summary.json");
        report::write_json_file(&p, &summary)?;
        say(summary.to_string());
        Ok(())
    }

    fn train(&mut self) -> Result<()> {
        let corpus = self.corpus()?;
        let vocab = build_corpus_vocabulary(
            &corpus.split.train,
            corpus.catalog.records(),
            self.config.max_vocab,
            self.config.oov_buckets,
        )?;
        let dims = ModelDims::new(&self.config.model_config(), &vocab);
        let data = TrainingData::prepare(&corpus.split, &corpus.catalog, &vocab, dims.category_rows)?;
        let t = Instant::now();
        let (params, log) = train(&data, dims, &self.config.train_config(), self.seed).map_err(numeric)?;
        let wall = t.elapsed().as_secs_f64();

        let vp = self.config.path("vocab", "vocab.bin");
        formats::save_vocab(&vp, &vocab)?;
        self.record(&vp);
        let mp = self.config.path("model", "model.bin");
        formats::save_model(&mp, &params)?;
        self.record(&mp);
        report::write_training_log(self.outdir, &log, wall)?;
        self.out("train_log.csv");
        self.out("train_summary.json");
        say(format!(
            "{} steps, heldout in-batch R@1 {:.4}, {wall:.1} s",
            log.steps, log.final_r1
        ));
        Ok(())
    }

    fn mine(&mut self) -> Result<()> {
        let corpus = self.corpus()?;
        let (vocab, params) = self.load_model("model", "model.bin")?;
        let data = self.data(&corpus, &vocab, &params)?;
        let (params, _pool, rep) =
            run_iterative_mining(params, &data, &self.config.mining_config(), self.seed).map_err(numeric)?;
        let mp = self.config.path("mined_model", "model_mined.bin");
        formats::save_model(&mp, &params)?;
        self.record(&mp);
        report::write_mining_report(self.outdir, &rep)?;
        self.out("mining.csv");
        self.out("mining_curve.json");
        for r in &rep.rounds {
            say(format!(
                "round {}: +{} negatives (pool {}), heldout R@1 {:.4}, AUC {:.4}",
                r.round, r.new_negatives, r.pool_size, r.heldout_r1, r.auc
            ));
        }
        Ok(())
    }

    fn build(&self, kind: &str, encodings: &[Vec<f32>], ids: Vec<String>) -> Result<AnnIndex> {
        let store = build_brute(encodings, ids)?;
        let (s, c, p, _) = self.config.index_shape(store.len(), store.dim);
        let kind = match kind {
            "brute" => AnnKind::Brute,
            "ah" => AnnKind::Ah(build_ah(&store, s, c, self.seed)?),
            "tree" => AnnKind::TreeAh(build_tree_ah(&store, p, s, c, self.seed)?),
            other => return Err(Error::Usage(format!("unknown index kind {other:?}"))),
        };
        Ok(AnnIndex { store, kind })
    }

    fn search_params(&self, index: &AnnIndex) -> SearchParams {
        let (_, _, _, probes) = self.config.index_shape(index.len(), index.store.dim);
        SearchParams {
            probes,
            reorder: self.config.reorder,
        }
    }

    fn build_index(&mut self) -> Result<()> {
        let catalog = jsonl::load_catalog(&self.config.path("kb", "kb.jsonl"))?;
        let (vocab, params) = self.load_model("model", "model.bin")?;
        let enc = encode_catalog(&params, &vocab, &catalog);
        let ids = catalog.ids().map(String::from).collect();
        let index = self.build(&self.config.index_kind, &enc, ids)?;
        let ip = self.config.path("index", "index.bin");
        formats::save_index(&ip, &index)?;
        self.record(&ip);
        let (s, c, p, probes) = self.config.index_shape(index.len(), index.store.dim);
        say(format!(
            "{} index over {} entities (D={}, S={s}, C={c}, P={p}, probes={probes})",
            index.kind.tag(),
            index.len(),
            index.store.dim
        ));
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let corpus = self.corpus()?;
        let (vocab, params) = self.load_model("model", "model.bin")?;
        let enc = encode_catalog(&params, &vocab, &corpus.catalog);
        let ids: Vec<String> = corpus.catalog.ids().map(String::from).collect();
        let eval_set = &corpus.split.heldout;

        let mut rows = Vec::new();
        for (kind, name) in [("brute", "DEER"), ("ah", "DEER-AH"), ("tree", "DEER-Tree+AH")] {
            let index = self.build(kind, &enc, ids.clone())?;
            let r = DeerRetriever {
                name: name.to_string(),
                params: &params,
                vocab: &vocab,
                search: self.search_params(&index),
                index: &index,
            };
            rows.push(evaluate_retriever(&r, &corpus.catalog, eval_set, &DEFAULT_KS)?.report_row());
        }
        let prior = build_alias_table(&corpus.split.train);
        let ext = extend_alias_table(&prior, &corpus.split.train, self.config.extension_mode()?);
        let ap = self.out("alias_table.jsonl");
        formats::save_alias_table(&ap, &prior)?;
        let baselines: Vec<Box<dyn Retriever>> = vec![
            Box::new(AliasRetriever {
                name: "AT-Prior".into(),
                table: prior,
            }),
            Box::new(AliasRetriever {
                name: "AT-Ext".into(),
                table: ext,
            }),
            Box::new(Bm25Retriever {
                index: build_bm25(&corpus.catalog, self.config.bm25()),
            }),
        ];
        for r in &baselines {
            rows.push(evaluate_retriever(r.as_ref(), &corpus.catalog, eval_set, &DEFAULT_KS)?.report_row());
        }
        let c = report::comparison_report(&rows)?;
        report::write_comparison(self.outdir, &c)?;
        for n in ["report.txt", "report.csv", "report.json"] {
            self.out(n);
        }
        print!("{}", c.text);
        Ok(())
    }

    fn query(&mut self, args: &QueryArgs) -> Result<()> {
        let catalog = jsonl::load_catalog(&self.config.path("kb", "kb.jsonl"))?;
        let (vocab, params) = self.load_model("model", "model.bin")?;
        let span = tokenize(&args.span);
        if span.is_empty() {
            return Err(Error::Usage("--span has no tokens".into()));
        }
        let mut tokens = tokenize(&args.context);
        let start = tokens
            .windows(span.len())
            .position(|w| w == span.as_slice())
            .unwrap_or_else(|| {
                let mid = tokens.len() / 2;
                tokens.splice(mid..mid, span.iter().cloned());
                mid
            });
        let doc = AnnotatedDocument {
            doc_id: "query".into(),
            sentences: vec![(0, tokens.len())],
            anchors: vec![Anchor {
                start,
                end: start + span.len(),
                entity_id: String::new(),
            }],
            tokens,
        };
        let features = mention_features(&doc, &doc.anchors[0])?;
        let q: Vec<f32> = params
            .encode_mention(&EncodedMention::new(&features, &vocab))
            .iter()
            .map(|&x| x as f32)
            .collect();

        let ip = self.config.path("index", "index.bin");
        let index = if ip.exists() {
            formats::load_index(&ip)?
        } else {
            let enc = encode_catalog(&params, &vocab, &catalog);
            AnnIndex {
                store: build_brute(&enc, catalog.ids().map(String::from).collect())?,
                kind: AnnKind::Brute,
            }
        };
        let k = args.k.unwrap_or(self.config.top_k);
        let hits = match index.search(&q, k, self.search_params(&index)) {
            Err(deer_core::Error::ZeroVector(_)) => Vec::new(),
            other => other?,
        };
        let results: Vec<_> = hits
            .iter()
            .map(|h| {
                let id = index.store.id(h.index);
                json!({
                    "entity_id": id,
                    "title": catalog.get(id).map(|r| r.title.as_str()).unwrap_or(""),
                    "score": h.score,
                })
            })
            .collect();
        say(serde_json::to_string_pretty(&json!({ "span": args.span, "results": results })).expect("plain json"));
        Ok(())
    }

    fn benchmark(&mut self) -> Result<()> {
        let cfg = self.config;
        let data = random_unit_vectors(cfg.bench_vectors, cfg.bench_dim, self.seed);
        let queries = random_unit_vectors(cfg.bench_queries, cfg.bench_dim, self.seed ^ 0x7175_6572);
        let ids: Vec<String> = (0..data.len()).map(|i| format!("v{i:08}")).collect();
        let k = cfg.top_k;

        let brute = self.build("brute", &data, ids.clone())?;
        let ah = self.build("ah", &data, ids.clone())?;
        let tree = self.build("tree", &data, ids)?;
        let reference = queries
            .iter()
            .map(|q| search_brute(&brute.store, q, k))
            .collect::<deer_core::Result<Vec<Vec<Hit>>>>()?;
        let sp = self.search_params(&tree);
        let raw = SearchParams { reorder: 0, ..sp };
        let mut rows: Vec<BenchRow> = Vec::new();
        for (name, index, params) in [
            ("brute", &brute, sp),
            ("ah", &ah, raw),
            ("ah+reorder", &ah, sp),
            ("tree+ah", &tree, raw),
            ("tree+ah+reorder", &tree, sp),
        ] {
            if name.ends_with("reorder") && sp.reorder == 0 {
                continue;
            }
            rows.push(bench_index(name, index, params, &queries, &reference, k, cfg.warmup, cfg.repeats)?);
        }
        let p = self.out("benchmark.csv");
        report::write_benchmark(&p, &rows)?;
        let (s, c, parts, probes) = cfg.index_shape(data.len(), cfg.bench_dim);
        say(format!(
            "N={} D={} k={k} S={s} C={c} P={parts} probes={probes} reorder={}",
            data.len(),
            cfg.bench_dim,
            cfg.reorder
        ));
        for r in &rows {
            say(format!(
                "{:<16} mean {:.4} ms  p50 {:.4}  p99 {:.4}  overlap {:.4}",
                r.method, r.mean_ms, r.p50_ms, r.p99_ms, r.recall_overlap
            ));
        }
        Ok(())
    }

    fn gradcheck(&mut self, args: &GradcheckArgs) -> Result<()> {
        let t = Instant::now();
        let rep = random_gradcheck(args.dims, args.samples, args.epsilon, self.seed)?;
        let missing: Vec<&str> = rep
            .per_tensor
            .iter()
            .filter(|(_, e)| e.is_none())
            .map(|(n, _)| *n)
            .collect();
        let out = json!({
            "max_relative_error": rep.max_relative_error,
            "coordinates": rep.coordinates,
            "skipped_kinks": rep.skipped_kinks,
            "per_tensor": rep.per_tensor.iter().map(|(n, e)| json!({"tensor": n, "max_relative_error": e})).collect::<Vec<_>>(),
            "seconds": t.elapsed().as_secs_f64(),
        });
        let p = self.out("gradcheck.json");
        report::write_json_file(&p, &out)?;
        say(format!(
            "max relative error {:.3e} over {} coordinates ({} kinks skipped)",
            rep.max_relative_error, rep.coordinates, rep.skipped_kinks
        ));
        if !missing.is_empty() {
            return Err(Error::Numeric(format!("tensors not probed: {}", missing.join(", "))));
        }
        if !(rep.max_relative_error < GRADCHECK_TOLERANCE) {
            return Err(Error::Numeric(format!(
                "max relative error {:.3e} is not below {GRADCHECK_TOLERANCE:e}",
                rep.max_relative_error
            )));
        }
        Ok(())
    }
}
