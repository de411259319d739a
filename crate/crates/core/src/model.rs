//! The two towers and their parameters.
//!
//! Each text feature is embedded as the mean of its unigram rows
//! concatenated with the mean of its bigram rows and projected by a
//! per-feature affine layer with ReLU. Categories are hashed into their own
//! table, averaged and projected the same way. Compound layers concatenate
//! child encodings:
//!
//! ```text
//! mention: ctx = relu(W [left; right; sentence] + b)    phi = W' [ctx; span] + b'
//! entity:  doc = relu(W [paragraph; categories] + b)    psi = W' [doc; title] + b'
//! ```
//!
//! The final layers are linear so encodings can point anywhere.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{
    encode_text, fnv1a64, EncodedText, EntityFeatures, MentionFeatures, NgramVocabulary,
    TextFeature,
};
use crate::linalg::{dot, norm};
use crate::{Error, Result};

/// Norms below this make a cosine undefined.
pub const DEGENERATE_NORM: f64 = 1e-12;
const EMBEDDING_INIT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TextKind {
    Span,
    LeftContext,
    RightContext,
    Sentence,
    Title,
    Paragraph,
}

impl TextKind {
    pub const ALL: [TextKind; 6] = [
        TextKind::Span,
        TextKind::LeftContext,
        TextKind::RightContext,
        TextKind::Sentence,
        TextKind::Title,
        TextKind::Paragraph,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TextKind::Span => "span",
            TextKind::LeftContext => "left",
            TextKind::RightContext => "right",
            TextKind::Sentence => "sentence",
            TextKind::Title => "title",
            TextKind::Paragraph => "paragraph",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            rows,
            width,
            data: vec![0.0; rows * width],
        }
    }

    #[inline]
    pub fn row(&self, id: u32) -> &[f64] {
        let at = id as usize * self.width;
        &self.data[at..at + self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let at = id as usize * self.width;
        &mut self.data[at..at + self.width]
    }

    /// Mean of the given rows written into `out`; zeros when `ids` is empty.
    fn mean_into(&self, ids: &[u32], out: &mut [f64]) {
        out.fill(0.0);
        if ids.is_empty() {
            return;
        }
        for &id in ids {
            for (o, v) in out.iter_mut().zip(self.row(id)) {
                *o += v;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }
}

/// `activation(W x + b)` with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl AffineLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    #[inline]
    pub fn weight_row(&self, out: usize) -> &[f64] {
        &self.weights[out * self.inputs..(out + 1) * self.inputs]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(Error::WidthMismatch {
                expected: self.inputs,
                got: x.len(),
            });
        }
        Ok(self.apply(x))
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let z = dot(self.weight_row(o), x) + self.bias[o];
                match self.activation {
                    Activation::Relu => z.max(0.0),
                    Activation::Identity => z,
                }
            })
            .collect()
    }

    fn init_glorot(&mut self, rng: &mut ChaCha8Rng) {
        let limit = libm::sqrt(6.0 / (self.inputs + self.outputs) as f64);
        for w in &mut self.weights {
            *w = rng.gen_range(-limit..limit);
        }
    }
}

/// Embedding width, encoding width and table sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub encode_dim: usize,
    pub vocab_size: usize,
    pub oov_buckets: usize,
    pub category_rows: usize,
}

impl ModelDims {
    pub fn new(config: &ModelConfig, vocab: &NgramVocabulary) -> Self {
        Self {
            embed_dim: config.embed_dim,
            encode_dim: config.encode_dim,
            vocab_size: vocab.vocab_size(),
            oov_buckets: vocab.oov_buckets() as usize,
            category_rows: config.category_rows,
        }
    }

    /// Rows of each n-gram table.
    pub fn id_space(&self) -> usize {
        self.vocab_size + self.oov_buckets
    }

    /// Closed-form count of every learnable scalar.
    pub fn parameter_count(&self) -> usize {
        let (e, d) = (self.embed_dim, self.encode_dim);
        let affine = |i: usize, o: usize| i * o + o;
        2 * self.id_space() * e
            + self.category_rows * e
            + 6 * affine(2 * e, d)
            + affine(e, d)
            + affine(3 * d, d)
            + 3 * affine(2 * d, d)
            + 3
    }
}

/// Model shape chosen by the user; table sizes come from the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encode_dim: usize,
    pub category_rows: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encode_dim: 64,
            category_rows: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub unigram_table: EmbeddingTable,
    pub bigram_table: EmbeddingTable,
    pub category_table: EmbeddingTable,
    /// One layer per [`TextKind`], indexed by [`TextKind::index`].
    pub text_layers: [AffineLayer; 6],
    pub category_layer: AffineLayer,
    pub mention_context_combiner: AffineLayer,
    pub mention_combiner: AffineLayer,
    pub entity_doc_combiner: AffineLayer,
    pub entity_combiner: AffineLayer,
    /// Multiplier from cosine to softmax logit.
    pub softmax_scale: f64,
    /// Multiplier from cosine to the hard-pair logistic logit.
    pub hard_scale: f64,
    /// Offset of the hard-pair logistic logit.
    pub hard_offset: f64,
}

/// Names of the tensors in [`ModelParams::tensors`] order.
pub const TENSOR_NAMES: [&str; TENSOR_COUNT] = [
    "unigram_table",
    "bigram_table",
    "category_table",
    "text.span.weights",
    "text.span.bias",
    "text.left.weights",
    "text.left.bias",
    "text.right.weights",
    "text.right.bias",
    "text.sentence.weights",
    "text.sentence.bias",
    "text.title.weights",
    "text.title.bias",
    "text.paragraph.weights",
    "text.paragraph.bias",
    "category_layer.weights",
    "category_layer.bias",
    "mention_context_combiner.weights",
    "mention_context_combiner.bias",
    "mention_combiner.weights",
    "mention_combiner.bias",
    "entity_doc_combiner.weights",
    "entity_doc_combiner.bias",
    "entity_combiner.weights",
    "entity_combiner.bias",
    "softmax_scale",
    "hard_scale",
    "hard_offset",
];

pub const TENSOR_COUNT: usize = 28;
/// Tensors 0..3 are embedding tables with sparse gradients.
pub const TABLE_TENSORS: usize = 3;

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let (e, d) = (dims.embed_dim, dims.encode_dim);
        let text = || AffineLayer::zeros(2 * e, d, Activation::Relu);
        Self {
            dims,
            unigram_table: EmbeddingTable::zeros(dims.id_space(), e),
            bigram_table: EmbeddingTable::zeros(dims.id_space(), e),
            category_table: EmbeddingTable::zeros(dims.category_rows, e),
            text_layers: [text(), text(), text(), text(), text(), text()],
            category_layer: AffineLayer::zeros(e, d, Activation::Relu),
            mention_context_combiner: AffineLayer::zeros(3 * d, d, Activation::Relu),
            mention_combiner: AffineLayer::zeros(2 * d, d, Activation::Identity),
            entity_doc_combiner: AffineLayer::zeros(2 * d, d, Activation::Relu),
            entity_combiner: AffineLayer::zeros(2 * d, d, Activation::Identity),
            softmax_scale: 1.0,
            hard_scale: 1.0,
            hard_offset: 0.0,
        }
    }

    /// Seeded initialization: embeddings uniform in ±0.05, layer weights
    /// Glorot-uniform, biases zero, `a = a_h = 1`, `b_h = 0`.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut params = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for table in [
            &mut params.unigram_table,
            &mut params.bigram_table,
            &mut params.category_table,
        ] {
            for v in &mut table.data {
                *v = rng.gen_range(-EMBEDDING_INIT..EMBEDDING_INIT);
            }
        }
        for layer in params.layers_mut() {
            layer.init_glorot(&mut rng);
        }
        params
    }

    /// Every affine layer in declaration order.
    pub fn layers(&self) -> [&AffineLayer; 11] {
        let t = &self.text_layers;
        [
            &t[0],
            &t[1],
            &t[2],
            &t[3],
            &t[4],
            &t[5],
            &self.category_layer,
            &self.mention_context_combiner,
            &self.mention_combiner,
            &self.entity_doc_combiner,
            &self.entity_combiner,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut AffineLayer; 11] {
        let [t0, t1, t2, t3, t4, t5] = &mut self.text_layers;
        [
            t0,
            t1,
            t2,
            t3,
            t4,
            t5,
            &mut self.category_layer,
            &mut self.mention_context_combiner,
            &mut self.mention_combiner,
            &mut self.entity_doc_combiner,
            &mut self.entity_combiner,
        ]
    }

    /// Flat views of all learnable state in declaration order; see
    /// [`TENSOR_NAMES`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            &self.unigram_table.data,
            &self.bigram_table.data,
            &self.category_table.data,
        ];
        for layer in self.layers() {
            out.push(&layer.weights);
            out.push(&layer.bias);
        }
        out.push(core::slice::from_ref(&self.softmax_scale));
        out.push(core::slice::from_ref(&self.hard_scale));
        out.push(core::slice::from_ref(&self.hard_offset));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(TENSOR_COUNT);
        out.push(&mut self.unigram_table.data);
        out.push(&mut self.bigram_table.data);
        out.push(&mut self.category_table.data);
        let [t0, t1, t2, t3, t4, t5] = &mut self.text_layers;
        for layer in [
            t0,
            t1,
            t2,
            t3,
            t4,
            t5,
            &mut self.category_layer,
            &mut self.mention_context_combiner,
            &mut self.mention_combiner,
            &mut self.entity_doc_combiner,
            &mut self.entity_combiner,
        ] {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        out.push(core::slice::from_mut(&mut self.softmax_scale));
        out.push(core::slice::from_mut(&mut self.hard_scale));
        out.push(core::slice::from_mut(&mut self.hard_offset));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .iter()
            .zip(TENSOR_NAMES)
            .find(|(t, _)| t.iter().any(|v| !v.is_finite()))
            .map(|(_, name)| name)
    }

    pub fn text_layer(&self, kind: TextKind) -> &AffineLayer {
        &self.text_layers[kind.index()]
    }

    fn text_input(&self, text: &EncodedText) -> Vec<f64> {
        let e = self.dims.embed_dim;
        let mut x = vec![0.0; 2 * e];
        let (uni, bi) = x.split_at_mut(e);
        self.unigram_table.mean_into(&text.unigrams, uni);
        self.bigram_table.mean_into(&text.bigrams, bi);
        x
    }

    pub fn trace_text(&self, kind: TextKind, text: &EncodedText) -> TextTrace {
        let input = self.text_input(text);
        let output = self.text_layer(kind).apply(&input);
        TextTrace { input, output }
    }

    pub fn trace_categories(&self, rows: &[u32]) -> TextTrace {
        let mut input = vec![0.0; self.dims.embed_dim];
        self.category_table.mean_into(rows, &mut input);
        let output = self.category_layer.apply(&input);
        TextTrace { input, output }
    }

    pub fn trace_mention(&self, m: &EncodedMention) -> MentionTrace {
        let span = self.trace_text(TextKind::Span, &m.span);
        let left = self.trace_text(TextKind::LeftContext, &m.left);
        let right = self.trace_text(TextKind::RightContext, &m.right);
        let sentence = self.trace_text(TextKind::Sentence, &m.sentence);
        let context_input = concat(&[&left.output, &right.output, &sentence.output]);
        let context = self.mention_context_combiner.apply(&context_input);
        let top_input = concat(&[&context, &span.output]);
        let encoding = self.mention_combiner.apply(&top_input);
        MentionTrace {
            span,
            left,
            right,
            sentence,
            context_input,
            context,
            top_input,
            encoding,
        }
    }

    pub fn trace_entity(&self, e: &EncodedEntity) -> EntityTrace {
        let title = self.trace_text(TextKind::Title, &e.title);
        let paragraph = self.trace_text(TextKind::Paragraph, &e.paragraph);
        let categories = self.trace_categories(&e.categories);
        let doc_input = concat(&[&paragraph.output, &categories.output]);
        let doc = self.entity_doc_combiner.apply(&doc_input);
        let top_input = concat(&[&doc, &title.output]);
        let encoding = self.entity_combiner.apply(&top_input);
        EntityTrace {
            title,
            paragraph,
            categories,
            doc_input,
            doc,
            top_input,
            encoding,
        }
    }

    /// The mention tower.
    pub fn encode_mention(&self, m: &EncodedMention) -> EncodingVector {
        EncodingVector(self.trace_mention(m).encoding)
    }

    /// The entity tower.
    pub fn encode_entity(&self, e: &EncodedEntity) -> EncodingVector {
        EncodingVector(self.trace_entity(e).encoding)
    }
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        out.extend_from_slice(p);
    }
    out
}

/// Input and post-activation output of one leaf encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTrace {
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

/// Intermediate values of one mention forward pass, kept for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionTrace {
    pub span: TextTrace,
    pub left: TextTrace,
    pub right: TextTrace,
    pub sentence: TextTrace,
    pub context_input: Vec<f64>,
    pub context: Vec<f64>,
    pub top_input: Vec<f64>,
    pub encoding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityTrace {
    pub title: TextTrace,
    pub paragraph: TextTrace,
    pub categories: TextTrace,
    pub doc_input: Vec<f64>,
    pub doc: Vec<f64>,
    pub top_input: Vec<f64>,
    pub encoding: Vec<f64>,
}

/// Mention features resolved to n-gram ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedMention {
    pub span: EncodedText,
    pub left: EncodedText,
    pub right: EncodedText,
    pub sentence: EncodedText,
}

impl EncodedMention {
    pub fn new(features: &MentionFeatures, vocab: &NgramVocabulary) -> Self {
        Self {
            span: encode_text(&features.span, vocab),
            left: encode_text(&features.left_context, vocab),
            right: encode_text(&features.right_context, vocab),
            sentence: encode_text(&features.sentence, vocab),
        }
    }

    pub fn texts(&self) -> [&EncodedText; 4] {
        [&self.span, &self.left, &self.right, &self.sentence]
    }
}

/// Entity features resolved to n-gram ids and category rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedEntity {
    pub title: EncodedText,
    pub paragraph: EncodedText,
    pub categories: Vec<u32>,
}

impl EncodedEntity {
    pub fn new(features: &EntityFeatures, vocab: &NgramVocabulary, category_rows: usize) -> Self {
        Self {
            title: encode_text(&features.title, vocab),
            paragraph: encode_text(&features.paragraph, vocab),
            categories: features
                .categories
                .iter()
                .map(|c| category_row(c, category_rows))
                .collect(),
        }
    }

    pub fn texts(&self) -> [&EncodedText; 2] {
        [&self.title, &self.paragraph]
    }
}

/// Row of a category name in the category table.
pub fn category_row(name: &str, rows: usize) -> u32 {
    (fnv1a64(name.as_bytes()) % rows as u64) as u32
}

/// Output of either tower.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingVector(pub Vec<f64>);

impl core::ops::Deref for EncodingVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Encodes one text feature through its leaf encoder.
pub fn encode_text_feature(
    feature: &TextFeature,
    kind: TextKind,
    params: &ModelParams,
    vocab: &NgramVocabulary,
) -> EncodingVector {
    EncodingVector(params.trace_text(kind, &encode_text(feature, vocab)).output)
}

pub fn encode_categories(categories: &[String], params: &ModelParams) -> EncodingVector {
    let rows: Vec<u32> = categories
        .iter()
        .map(|c| category_row(c, params.dims.category_rows))
        .collect();
    EncodingVector(params.trace_categories(&rows).output)
}

/// Concatenates `children` in order and applies `layer`.
pub fn combine(children: &[&[f64]], layer: &AffineLayer) -> Result<EncodingVector> {
    layer.forward(&concat(children)).map(EncodingVector)
}

pub fn encode_mention(
    features: &MentionFeatures,
    params: &ModelParams,
    vocab: &NgramVocabulary,
) -> EncodingVector {
    params.encode_mention(&EncodedMention::new(features, vocab))
}

pub fn encode_entity(
    features: &EntityFeatures,
    params: &ModelParams,
    vocab: &NgramVocabulary,
) -> EncodingVector {
    params.encode_entity(&EncodedEntity::new(features, vocab, params.dims.category_rows))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either norm is below [`DEGENERATE_NORM`]; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine(u: &[f64], v: &[f64]) -> Cosine {
    let (nu, nv) = (norm(u), norm(v));
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Row-major `B x B` cosine scores: rows are mentions, columns entities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub size: usize,
    pub entries: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::ShapeMismatch("similarity matrix must be square".into()));
        }
        Ok(Self {
            size,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.size + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.size..(row + 1) * self.size]
    }
}

pub fn similarity_matrix<M, E>(mentions: &[M], entities: &[E]) -> Result<SimilarityMatrix>
where
    M: AsRef<[f64]>,
    E: AsRef<[f64]>,
{
    if mentions.len() != entities.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} mentions vs {} entities",
            mentions.len(),
            entities.len()
        )));
    }
    if mentions.len() < 2 {
        return Err(Error::TooFewExamples {
            needed: 2,
            got: mentions.len(),
        });
    }
    let size = mentions.len();
    let mut entries = Vec::with_capacity(size * size);
    for m in mentions {
        for e in entities {
            entries.push(cosine(m.as_ref(), e.as_ref()).value);
        }
    }
    Ok(SimilarityMatrix { size, entries })
}

impl AsRef<[f64]> for EncodingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{PAD, PLACEHOLDER};
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn vocab() -> NgramVocabulary {
        NgramVocabulary::from_entries([("a", 2u32), ("b", 3), ("a b", 4)], 8).unwrap()
    }

    fn dims(e: usize, d: usize, vocab: &NgramVocabulary) -> ModelDims {
        ModelDims::new(
            &ModelConfig {
                embed_dim: e,
                encode_dim: d,
                category_rows: 16,
            },
            vocab,
        )
    }

    fn tf(tokens: &[&str]) -> TextFeature {
        TextFeature::from(tokens)
    }

    fn mention(span: &[&str], left: &[&str], right: &[&str], sentence: &[&str]) -> MentionFeatures {
        MentionFeatures {
            span: tf(span),
            left_context: tf(left),
            right_context: tf(right),
            sentence: tf(sentence),
        }
    }

    #[test]
    fn zero_params_give_zero_encodings() {
        let v = vocab();
        let p = ModelParams::zeros(dims(4, 3, &v));
        let m = mention(&["a"], &["b"], &["a", "b"], &[PLACEHOLDER, "b"]);
        assert!(encode_mention(&m, &p, &v).iter().all(|&x| x == 0.0));
        let e = EntityFeatures {
            title: tf(&["a"]),
            paragraph: tf(&["b"]),
            categories: alloc::vec!["x".to_string()],
        };
        assert!(encode_entity(&e, &p, &v).iter().all(|&x| x == 0.0));
        assert!(encode_text_feature(&tf(&["a"]), TextKind::Span, &p, &v)
            .iter()
            .all(|&x| x == 0.0));
        assert!(encode_categories(&[], &p).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_dim_text_encoder_uses_means() {
        // E = D = 1: output = relu(w_u * mean(unigrams) + w_b * mean(bigrams) + b)
        let v = vocab();
        let mut p = ModelParams::zeros(dims(1, 1, &v));
        p.unigram_table.data[2] = 2.0; // "a"
        p.unigram_table.data[3] = 4.0; // "b"
        p.bigram_table.data[4] = 0.5; // "a b"
        let layer = &mut p.text_layers[TextKind::Span.index()];
        layer.weights = alloc::vec![1.0, 1.0];
        let out = encode_text_feature(&tf(&["a", "a"]), TextKind::Span, &p, &v);
        // unigram mean 2, bigram ("a","a") is OOV and its bucket row is 0
        assert_eq!(out.0, [2.0]);
        let out = encode_text_feature(&tf(&["a", "b"]), TextKind::Span, &p, &v);
        assert_eq!(out.0, [3.0 + 0.5]);
        p.text_layers[TextKind::Span.index()].bias = alloc::vec![-10.0];
        let out = encode_text_feature(&tf(&["a", "b"]), TextKind::Span, &p, &v);
        assert_eq!(out.0, [0.0]);
    }

    #[test]
    fn padding_never_changes_encodings() {
        let v = vocab();
        let p = ModelParams::init(dims(4, 3, &v), 9);
        let empty = encode_text_feature(&tf(&[]), TextKind::Title, &p, &v);
        let pads = encode_text_feature(&tf(&[PAD, PAD, PAD]), TextKind::Title, &p, &v);
        assert_eq!(empty, pads);
        let plain = encode_text_feature(&tf(&["a", "b"]), TextKind::Title, &p, &v);
        let padded = encode_text_feature(&tf(&["a", "b", PAD]), TextKind::Title, &p, &v);
        assert_eq!(plain, padded);
    }

    #[test]
    fn category_encoder() {
        let v = vocab();
        let mut p = ModelParams::init(dims(2, 2, &v), 3);
        let x = "x".to_string();
        assert_eq!(
            encode_categories(&[x.clone(), x.clone()], &p),
            encode_categories(core::slice::from_ref(&x), &p)
        );

        // Two categories on a 2-wide table; identity weights, bias (0.1, -0.2).
        let names = ["alpha".to_string(), "beta".to_string()];
        let (ra, rb) = (category_row(&names[0], 16), category_row(&names[1], 16));
        assert_ne!(ra, rb);
        p.category_table.row_mut(ra).copy_from_slice(&[1.0, -3.0]);
        p.category_table.row_mut(rb).copy_from_slice(&[3.0, 1.0]);
        p.category_layer.weights = alloc::vec![1.0, 0.0, 0.0, 1.0];
        p.category_layer.bias = alloc::vec![0.1, -0.2];
        // mean = (2, -1); + bias = (2.1, -1.2); relu -> (2.1, 0)
        let out = encode_categories(&names, &p);
        assert!((out[0] - 2.1).abs() < 1e-12);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn combine_arithmetic() {
        let mut layer = AffineLayer::zeros(2, 1, Activation::Identity);
        layer.weights = alloc::vec![1.0, -1.0];
        assert_eq!(combine(&[&[2.0], &[3.0]], &layer).unwrap().0, [-1.0]);
        assert!(combine(&[&[2.0]], &layer).is_err());

        let mut id = AffineLayer::zeros(3, 3, Activation::Relu);
        id.weights = alloc::vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(combine(&[&[0.5, 1.0, 2.0]], &id).unwrap().0, [0.5, 1.0, 2.0]);
        let zero = AffineLayer::zeros(2, 2, Activation::Relu);
        assert_eq!(combine(&[&[0.0], &[0.0]], &zero).unwrap().0, [0.0, 0.0]);
    }

    #[test]
    fn towers_see_context() {
        let v = vocab();
        let p = ModelParams::init(dims(8, 8, &v), 5);
        let a = mention(&["a"], &["b", "b"], &["a"], &["b", PLACEHOLDER, "a"]);
        let b = mention(&["a"], &["q", "r"], &["s"], &["q", PLACEHOLDER, "s"]);
        assert_ne!(encode_mention(&a, &p, &v), encode_mention(&b, &p, &v));
        assert_eq!(encode_mention(&a, &p, &v), encode_mention(&a, &p, &v));
    }

    #[test]
    fn one_dim_entity_tower() {
        let v = vocab();
        let mut p = ModelParams::zeros(dims(1, 1, &v));
        p.unigram_table.data[2] = 1.5; // "a"
        p.text_layers[TextKind::Title.index()].weights = alloc::vec![2.0, 0.0];
        p.text_layers[TextKind::Paragraph.index()].weights = alloc::vec![1.0, 0.0];
        p.entity_doc_combiner.weights = alloc::vec![1.0, 1.0];
        p.entity_doc_combiner.bias = alloc::vec![0.5];
        p.entity_combiner.weights = alloc::vec![-1.0, 1.0];
        p.entity_combiner.bias = alloc::vec![0.25];
        let e = EntityFeatures {
            title: tf(&["a"]),
            paragraph: tf(&["a", "a"]),
            categories: alloc::vec![],
        };
        // title 3.0, paragraph 1.5, categories 0 -> doc 2.0 -> -2 + 3 + 0.25
        assert_eq!(encode_entity(&e, &p, &v).0, [1.25]);

        let bare = EntityFeatures {
            paragraph: tf(&[]),
            ..e
        };
        // doc = relu(0.5) -> -0.5 + 3 + 0.25
        assert_eq!(encode_entity(&bare, &p, &v).0, [2.75]);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).value, 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).value, 0.0);
        assert!((cosine(&[3.0, 4.0], &[4.0, 3.0]).value - 0.96).abs() < 1e-15);
        let c = cosine(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(c.degenerate && c.value == 0.0);
    }

    #[test]
    fn similarity_matrix_examples() {
        let basis = [[1.0, 0.0], [0.0, 1.0]];
        let s = similarity_matrix(&basis, &basis).unwrap();
        assert_eq!(s.entries, [1.0, 0.0, 0.0, 1.0]);

        let m = [[3.0, 4.0], [1.0, -1.0]];
        let e = [[4.0, 3.0], [0.0, 2.0]];
        let s = similarity_matrix(&m, &e).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(s.get(i, j), cosine(&m[i], &e[j]).value);
            }
        }
        assert!(similarity_matrix(&m, &e[..1]).is_err());
        assert!(similarity_matrix(&m[..1], &e[..1]).is_err());
    }

    #[test]
    fn parameter_count_closed_form() {
        let v = vocab();
        for (e, d) in [(1, 1), (4, 3), (8, 8)] {
            let dm = dims(e, d, &v);
            let p = ModelParams::zeros(dm);
            assert_eq!(p.parameter_count(), dm.parameter_count());
            assert_eq!(p.tensors().len(), TENSOR_COUNT);
        }
    }

    proptest! {
        #[test]
        fn cosine_symmetry_and_scale(
            u in proptest::collection::vec(-10.0f64..10.0, 5),
            v in proptest::collection::vec(-10.0f64..10.0, 5),
            c in 0.01f64..100.0,
        ) {
            let a = cosine(&u, &v).value;
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert!((a - cosine(&v, &u).value).abs() < 1e-12);
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            prop_assert!((a - cosine(&scaled, &v).value).abs() < 1e-9);
        }

        #[test]
        fn similarity_entries_in_range(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..6)
        ) {
            let s = similarity_matrix(&rows, &rows).unwrap();
            prop_assert!(s.entries.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
