//! Run configuration: a flat `key=value` file plus `--set key=value`
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use deer_core::baselines::{Bm25Params, ExtensionMode};
use deer_core::corpus::SyntheticConfig;
use deer_core::index::{default_partitions, default_probes, default_subspaces, DEFAULT_CENTROIDS};
use deer_core::mining::MiningConfig;
use deer_core::model::ModelConfig;
use deer_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every artifact and report goes here.
    pub outdir: String,
    /// Input and artifact paths; empty means the default name in `outdir`.
    pub kb: String,
    pub docs: String,
    pub vocab: String,
    pub model: String,
    pub mined_model: String,
    pub index: String,

    pub seed: Option<u64>,

    pub entities: usize,
    pub families: usize,
    pub topic_vocab: usize,
    pub mentions_per_entity: usize,
    pub ambiguous_fraction: f64,
    pub topic_words_per_mention: usize,
    pub family_words_per_mention: usize,
    pub anchors_per_document: usize,

    pub holdout: f64,
    pub max_vocab: usize,
    pub oov_buckets: u64,
    pub embed_dim: usize,
    pub encode_dim: usize,
    pub category_rows: usize,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub patience: usize,

    pub mining_rounds: usize,
    pub mining_k: usize,
    /// Step budget of each mining round.
    pub mining_steps: u64,

    /// `brute`, `ah` or `tree`.
    pub index_kind: String,
    /// 0 picks the defaults: `D/4` subspaces, 16 centroids, `ceil(sqrt N)`
    /// partitions, `P/20` probes.
    pub subspaces: usize,
    pub centroids: usize,
    pub partitions: usize,
    pub probes: usize,
    /// Exact rescoring of this many approximate candidates; 0 disables.
    pub reorder: usize,

    pub bm25_k1: f64,
    pub bm25_b: f64,
    /// `fallback` or `merged`.
    pub alias_extension: String,

    pub top_k: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub bench_vectors: usize,
    pub bench_dim: usize,
    pub bench_queries: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticConfig::default();
        let train = TrainConfig::default();
        let model = ModelConfig::default();
        Self {
            outdir: "out".into(),
            kb: String::new(),
            docs: String::new(),
            vocab: String::new(),
            model: String::new(),
            mined_model: String::new(),
            index: String::new(),
            seed: None,
            entities: syn.entities,
            families: syn.families,
            topic_vocab: syn.topic_vocab,
            mentions_per_entity: syn.mentions_per_entity,
            ambiguous_fraction: syn.ambiguous_fraction,
            topic_words_per_mention: syn.topic_words_per_mention,
            family_words_per_mention: syn.family_words_per_mention,
            anchors_per_document: syn.anchors_per_document,
            holdout: 0.1,
            max_vocab: 200_000,
            oov_buckets: 1_000,
            embed_dim: model.embed_dim,
            encode_dim: model.encode_dim,
            category_rows: model.category_rows,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            max_steps: train.max_steps,
            eval_every: train.eval_every,
            patience: train.patience,
            mining_rounds: 3,
            mining_k: 10,
            mining_steps: 2_000,
            index_kind: "ah".into(),
            subspaces: 0,
            centroids: 0,
            partitions: 0,
            probes: 0,
            reorder: 100,
            bm25_k1: Bm25Params::default().k1,
            bm25_b: Bm25Params::default().b,
            alias_extension: "fallback".into(),
            top_k: 10,
            warmup: 10,
            repeats: 1,
            bench_vectors: 100_000,
            bench_dim: 64,
            bench_queries: 200,
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

/// Parses `value` as the JSON type already held under `key`.
fn set_value(map: &mut Map<String, Value>, key: &str, value: &str) -> Result<()> {
    let slot = map
        .get_mut(key)
        .ok_or_else(|| usage(format!("unknown config key {key:?}")))?;
    let bad = || usage(format!("bad value {value:?} for {key}"));
    *slot = match slot {
        Value::String(_) => Value::String(value.into()),
        Value::Number(n) if n.is_f64() => {
            let v: f64 = value.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
        }
        // Integers, and the unset seed.
        Value::Number(_) | Value::Null => Value::Number(value.parse::<u64>().map_err(|_| bad())?.into()),
        _ => return Err(bad()),
    };
    Ok(())
}

/// `key=value` per line; blank lines and lines starting with `#` are
/// skipped.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: "expected key=value".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then the file, then each override in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            pairs = parse_pairs(&text, path)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects key=value, got {o:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(Self::default()).expect("plain struct") else {
            unreachable!("struct serializes to an object")
        };
        for (k, v) in pairs {
            set_value(&mut map, k, v)?;
        }
        let config: Self = serde_json::from_value(Value::Object(map)).map_err(|e| usage(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !["brute", "ah", "tree"].contains(&self.index_kind.as_str()) {
            return Err(usage(format!("index_kind must be brute, ah or tree, got {:?}", self.index_kind)));
        }
        self.extension_mode()?;
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(usage("holdout must be in (0, 1)"));
        }
        if self.top_k == 0 || self.repeats == 0 {
            return Err(usage("top_k and repeats must be at least 1"));
        }
        self.train_config().validate()?;
        self.synthetic().validate()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| usage("a seed is required (--seed N or seed=N)"))
    }

    /// `key` if set, otherwise `default_name` inside `outdir`.
    pub fn path(&self, key: &str, default_name: &str) -> PathBuf {
        let set = match key {
            "kb" => &self.kb,
            "docs" => &self.docs,
            "vocab" => &self.vocab,
            "model" => &self.model,
            "mined_model" => &self.mined_model,
            "index" => &self.index,
            _ => unreachable!("not a path key: {key}"),
        };
        if set.is_empty() {
            Path::new(&self.outdir).join(default_name)
        } else {
            PathBuf::from(set)
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            entities: self.entities,
            families: self.families,
            topic_vocab: self.topic_vocab,
            mentions_per_entity: self.mentions_per_entity,
            ambiguous_fraction: self.ambiguous_fraction,
            topic_words_per_mention: self.topic_words_per_mention,
            family_words_per_mention: self.family_words_per_mention,
            anchors_per_document: self.anchors_per_document,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            encode_dim: self.encode_dim,
            category_rows: self.category_rows,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            patience: self.patience,
        }
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            neighbors: self.mining_k,
            rounds: self.mining_rounds,
            train: TrainConfig {
                max_steps: self.mining_steps,
                ..self.train_config()
            },
        }
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }

    pub fn extension_mode(&self) -> Result<ExtensionMode> {
        match self.alias_extension.as_str() {
            "fallback" => Ok(ExtensionMode::Fallback),
            "merged" => Ok(ExtensionMode::Merged),
            other => Err(usage(format!("alias_extension must be fallback or merged, got {other:?}"))),
        }
    }

    /// `(S, C, P, probes)` with zeros replaced by the defaults for `n`
    /// vectors of width `dim`.
    pub fn index_shape(&self, n: usize, dim: usize) -> (usize, usize, usize, usize) {
        let or = |v: usize, d: usize| if v == 0 { d } else { v };
        let s = or(self.subspaces, default_subspaces(dim));
        let c = or(self.centroids, DEFAULT_CENTROIDS);
        let p = or(self.partitions, default_partitions(n)).min(n.max(1));
        let probes = or(self.probes, default_probes(p)).min(p);
        (s, c, p, probes)
    }
}
