//! Losses, exact gradients, SGD with momentum and the training loop.
//!
//! The softmax task scores every mention in a batch against every entity in
//! the batch; the other entities act as negatives. The hard-pair task is a
//! logistic classifier over labelled (mention, entity) pairs produced by
//! mining. When both are present their mean losses are summed with weight 1.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusSplit, EntityCatalog};
use crate::features::{entity_features, EncodedText, NgramVocabulary};
use crate::linalg::{axpy, dot, norm};
use crate::model::{
    AffineLayer, Activation, EncodedEntity, EncodedMention, EntityTrace, MentionTrace,
    ModelDims, ModelParams, SimilarityMatrix, TextKind, TextTrace, DEGENERATE_NORM,
    TABLE_TENSORS, TENSOR_COUNT, TENSOR_NAMES,
};
use crate::{Error, Result};

/// Minimum heldout improvement that resets the patience counter.
pub const PLATEAU_DELTA: f64 = 1e-3;

// Layer slots in `ModelParams::layers()` order.
const CATEGORY_LAYER: usize = 6;
const MENTION_CONTEXT: usize = 7;
const MENTION_TOP: usize = 8;
const ENTITY_DOC: usize = 9;
const ENTITY_TOP: usize = 10;
const LAYER_COUNT: usize = 11;

/// Gradient rows of an embedding table; rows not present are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub width: usize,
    pub rows: BTreeMap<u32, Vec<f64>>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn row_mut(&mut self, id: u32) -> &mut Vec<f64> {
        let width = self.width;
        self.rows.entry(id).or_insert_with(|| vec![0.0; width])
    }

    pub fn get(&self, coord: usize) -> f64 {
        let (row, col) = (coord / self.width, coord % self.width);
        self.rows.get(&(row as u32)).map_or(0.0, |r| r[col])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// One slot per [`ModelParams`] field, in the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub unigram_table: SparseRows,
    pub bigram_table: SparseRows,
    pub category_table: SparseRows,
    /// Indexed like [`ModelParams::layers`].
    pub layers: Vec<LayerGrad>,
    pub softmax_scale: f64,
    pub hard_scale: f64,
    pub hard_offset: f64,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            unigram_table: SparseRows::new(params.unigram_table.width),
            bigram_table: SparseRows::new(params.bigram_table.width),
            category_table: SparseRows::new(params.category_table.width),
            layers: params
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            softmax_scale: 0.0,
            hard_scale: 0.0,
            hard_offset: 0.0,
        }
    }

    pub fn table(&self, tensor: usize) -> &SparseRows {
        match tensor {
            0 => &self.unigram_table,
            1 => &self.bigram_table,
            2 => &self.category_table,
            _ => panic!("tensor {tensor} is not an embedding table"),
        }
    }

    /// Dense slice of a non-table tensor.
    pub fn dense(&self, tensor: usize) -> &[f64] {
        assert!((TABLE_TENSORS..TENSOR_COUNT).contains(&tensor));
        let at = tensor - TABLE_TENSORS;
        if at < 2 * LAYER_COUNT {
            let layer = &self.layers[at / 2];
            if at.is_multiple_of(2) {
                &layer.weights
            } else {
                &layer.bias
            }
        } else {
            match at - 2 * LAYER_COUNT {
                0 => core::slice::from_ref(&self.softmax_scale),
                1 => core::slice::from_ref(&self.hard_scale),
                _ => core::slice::from_ref(&self.hard_offset),
            }
        }
    }

    /// Gradient of one coordinate, addressed like [`ModelParams::tensors`].
    pub fn value(&self, tensor: usize, coord: usize) -> f64 {
        if tensor < TABLE_TENSORS {
            self.table(tensor).get(coord)
        } else {
            self.dense(tensor)[coord]
        }
    }

    pub fn squared_norm(&self) -> f64 {
        let tables: f64 = (0..TABLE_TENSORS)
            .flat_map(|t| self.table(t).rows.values())
            .map(|r| dot(r, r))
            .sum();
        let dense: f64 = (TABLE_TENSORS..TENSOR_COUNT)
            .map(|t| dot(self.dense(t), self.dense(t)))
            .sum();
        tables + dense
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        for t in 0..TENSOR_COUNT {
            let finite = if t < TABLE_TENSORS {
                self.table(t).rows.values().flatten().all(|v| v.is_finite())
            } else {
                self.dense(t).iter().all(|v| v.is_finite())
            };
            if !finite {
                return Some(TENSOR_NAMES[t]);
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLoss {
    pub loss: f64,
    /// Row-major `B x B` gradient with respect to the cosine scores.
    pub d_sims: Vec<f64>,
    pub d_scale: f64,
}

/// In-batch softmax over `a * sims`, mean-reduced over rows. The gold
/// entity of row `i` is column `i`.
pub fn softmax_loss_and_grad(sims: &SimilarityMatrix, scale: f64) -> Result<SoftmaxLoss> {
    let b = sims.size;
    if b < 2 {
        return Err(Error::TooFewExamples { needed: 2, got: b });
    }
    if !scale.is_finite() || sims.entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut d_sims = vec![0.0; b * b];
    let mut d_scale = 0.0;
    let mut probs = vec![0.0; b];
    for i in 0..b {
        let row = sims.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(scale * s));
        let mut z = 0.0;
        for (p, &s) in probs.iter_mut().zip(row) {
            *p = libm::exp(scale * s - max);
            z += *p;
        }
        loss += -(scale * row[i]) + max + libm::log(z);
        for j in 0..b {
            let d_logit = (probs[j] / z - if i == j { 1.0 } else { 0.0 }) * inv_b;
            d_sims[i * b + j] = scale * d_logit;
            d_scale += row[j] * d_logit;
        }
    }
    Ok(SoftmaxLoss {
        loss: loss * inv_b,
        d_sims,
        d_scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticLoss {
    pub loss: f64,
    pub d_score: f64,
    pub d_scale: f64,
    pub d_offset: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(a_h * s + b_h)` against `label`,
/// evaluated as `softplus(z) - y z`.
pub fn logistic_loss_and_grad(score: f64, label: bool, scale: f64, offset: f64) -> LogisticLoss {
    let z = scale * score + offset;
    let y = if label { 1.0 } else { 0.0 };
    let softplus = z.max(0.0) + libm::log1p(libm::exp(-z.abs()));
    let d_z = sigmoid(z) - y;
    LogisticLoss {
        loss: softplus - y * z,
        d_score: d_z * scale,
        d_scale: d_z * score,
        d_offset: d_z,
    }
}

/// Aligned mentions and entities; entity `i` is the gold of mention `i`.
#[derive(Debug, Clone)]
pub struct SoftmaxBatch<'a> {
    pub mentions: Vec<&'a EncodedMention>,
    pub entities: Vec<&'a EncodedEntity>,
}

/// Labelled pairs for the logistic task.
#[derive(Debug, Clone)]
pub struct PairBatch<'a> {
    pub mentions: Vec<&'a EncodedMention>,
    pub entities: Vec<&'a EncodedEntity>,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub softmax_loss: f64,
    pub pair_loss: f64,
    pub gradients: Gradients,
    pub similarity: Option<SimilarityMatrix>,
}

/// Hashes every ReLU on/off decision of a forward pass. Finite-difference
/// probes that flip one are measuring a kink, not a derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ActivationPattern(u64);

impl ActivationPattern {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn absorb(&mut self, values: &[f64]) {
        for v in values {
            self.0 ^= u64::from(*v > 0.0);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn mention(&mut self, t: &MentionTrace) {
        for leaf in [&t.span, &t.left, &t.right, &t.sentence] {
            self.absorb(&leaf.output);
        }
        self.absorb(&t.context);
    }

    fn entity(&mut self, t: &EntityTrace) {
        for leaf in [&t.title, &t.paragraph, &t.categories] {
            self.absorb(&leaf.output);
        }
        self.absorb(&t.doc);
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(String::from(what)))
    }
}

struct PairCosine {
    value: f64,
    /// Unit vectors and the inverse norms, `None` when degenerate.
    parts: Option<(Vec<f64>, Vec<f64>, f64, f64)>,
}

fn pair_cosine(u: &[f64], v: &[f64]) -> PairCosine {
    let (nu, nv) = (norm(u), norm(v));
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        return PairCosine {
            value: 0.0,
            parts: None,
        };
    }
    let uh: Vec<f64> = u.iter().map(|x| x / nu).collect();
    let vh: Vec<f64> = v.iter().map(|x| x / nv).collect();
    PairCosine {
        value: dot(&uh, &vh).clamp(-1.0, 1.0),
        parts: Some((uh, vh, 1.0 / nu, 1.0 / nv)),
    }
}

fn unit(v: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = norm(v);
    (n >= DEGENERATE_NORM).then(|| (v.iter().map(|x| x / n).collect(), 1.0 / n))
}

struct SoftmaxForward {
    mention_traces: Vec<MentionTrace>,
    entity_traces: Vec<EntityTrace>,
    sims: SimilarityMatrix,
}

fn softmax_forward(params: &ModelParams, batch: &SoftmaxBatch<'_>) -> Result<SoftmaxForward> {
    if batch.mentions.len() != batch.entities.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} mentions vs {} entities",
            batch.mentions.len(),
            batch.entities.len()
        )));
    }
    let mention_traces: Vec<MentionTrace> =
        batch.mentions.iter().map(|m| params.trace_mention(m)).collect();
    let entity_traces: Vec<EntityTrace> =
        batch.entities.iter().map(|e| params.trace_entity(e)).collect();
    for t in &mention_traces {
        check_finite(&t.encoding, "mention tower")?;
    }
    for t in &entity_traces {
        check_finite(&t.encoding, "entity tower")?;
    }
    let sims = crate::model::similarity_matrix(
        &mention_traces.iter().map(|t| t.encoding.as_slice()).collect::<Vec<_>>(),
        &entity_traces.iter().map(|t| t.encoding.as_slice()).collect::<Vec<_>>(),
    )?;
    Ok(SoftmaxForward {
        mention_traces,
        entity_traces,
        sims,
    })
}

struct PairForward {
    mention_traces: Vec<MentionTrace>,
    entity_traces: Vec<EntityTrace>,
    cosines: Vec<PairCosine>,
    losses: Vec<LogisticLoss>,
}

fn pair_forward(params: &ModelParams, batch: &PairBatch<'_>) -> Result<PairForward> {
    let n = batch.mentions.len();
    if batch.entities.len() != n || batch.labels.len() != n || n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "pair batch with {} mentions, {} entities, {} labels",
            n,
            batch.entities.len(),
            batch.labels.len()
        )));
    }
    let mention_traces: Vec<MentionTrace> =
        batch.mentions.iter().map(|m| params.trace_mention(m)).collect();
    let entity_traces: Vec<EntityTrace> =
        batch.entities.iter().map(|e| params.trace_entity(e)).collect();
    let mut cosines = Vec::with_capacity(n);
    let mut losses = Vec::with_capacity(n);
    for k in 0..n {
        check_finite(&mention_traces[k].encoding, "mention tower")?;
        check_finite(&entity_traces[k].encoding, "entity tower")?;
        let c = pair_cosine(&mention_traces[k].encoding, &entity_traces[k].encoding);
        losses.push(logistic_loss_and_grad(
            c.value,
            batch.labels[k],
            params.hard_scale,
            params.hard_offset,
        ));
        cosines.push(c);
    }
    Ok(PairForward {
        mention_traces,
        entity_traces,
        cosines,
        losses,
    })
}

/// Forward-only loss plus the activation pattern it went through.
fn forward_loss(
    params: &ModelParams,
    softmax: Option<&SoftmaxBatch<'_>>,
    pairs: Option<&PairBatch<'_>>,
) -> Result<(f64, ActivationPattern)> {
    let mut pattern = ActivationPattern::new();
    let mut loss = 0.0;
    if let Some(batch) = softmax {
        let fwd = softmax_forward(params, batch)?;
        loss += softmax_loss_and_grad(&fwd.sims, params.softmax_scale)?.loss;
        fwd.mention_traces.iter().for_each(|t| pattern.mention(t));
        fwd.entity_traces.iter().for_each(|t| pattern.entity(t));
    }
    if let Some(batch) = pairs {
        let fwd = pair_forward(params, batch)?;
        loss += fwd.losses.iter().map(|l| l.loss).sum::<f64>() / fwd.losses.len() as f64;
        fwd.mention_traces.iter().for_each(|t| pattern.mention(t));
        fwd.entity_traces.iter().for_each(|t| pattern.entity(t));
    }
    Ok((loss, pattern))
}

/// Total loss of a batch without gradients.
pub fn batch_loss(
    params: &ModelParams,
    softmax: Option<&SoftmaxBatch<'_>>,
    pairs: Option<&PairBatch<'_>>,
) -> Result<f64> {
    forward_loss(params, softmax, pairs).map(|(loss, _)| loss)
}

fn layer_backward(layer: &AffineLayer, x: &[f64], y: &[f64], dy: &[f64], grad: &mut LayerGrad) -> Vec<f64> {
    let mut dx = vec![0.0; layer.inputs];
    for o in 0..layer.outputs {
        let dz = match layer.activation {
            Activation::Relu if y[o] <= 0.0 => 0.0,
            _ => dy[o],
        };
        if dz == 0.0 {
            continue;
        }
        grad.bias[o] += dz;
        axpy(dz, x, &mut grad.weights[o * layer.inputs..(o + 1) * layer.inputs]);
        axpy(dz, layer.weight_row(o), &mut dx);
    }
    dx
}

fn scatter_mean(rows: &mut SparseRows, ids: &[u32], d_mean: &[f64]) {
    if ids.is_empty() {
        return;
    }
    let inv = 1.0 / ids.len() as f64;
    for &id in ids {
        axpy(inv, d_mean, rows.row_mut(id));
    }
}

fn text_backward(
    params: &ModelParams,
    kind: TextKind,
    text: &EncodedText,
    trace: &TextTrace,
    d_out: &[f64],
    grads: &mut Gradients,
) {
    let e = params.dims.embed_dim;
    let dx = layer_backward(
        params.text_layer(kind),
        &trace.input,
        &trace.output,
        d_out,
        &mut grads.layers[kind.index()],
    );
    scatter_mean(&mut grads.unigram_table, &text.unigrams, &dx[..e]);
    scatter_mean(&mut grads.bigram_table, &text.bigrams, &dx[e..]);
}

fn mention_backward(
    params: &ModelParams,
    m: &EncodedMention,
    t: &MentionTrace,
    d_enc: &[f64],
    grads: &mut Gradients,
) {
    let d = params.dims.encode_dim;
    let d_top = layer_backward(
        &params.mention_combiner,
        &t.top_input,
        &t.encoding,
        d_enc,
        &mut grads.layers[MENTION_TOP],
    );
    let (d_ctx, d_span) = d_top.split_at(d);
    let d_ctx_in = layer_backward(
        &params.mention_context_combiner,
        &t.context_input,
        &t.context,
        d_ctx,
        &mut grads.layers[MENTION_CONTEXT],
    );
    text_backward(params, TextKind::Span, &m.span, &t.span, d_span, grads);
    text_backward(params, TextKind::LeftContext, &m.left, &t.left, &d_ctx_in[..d], grads);
    text_backward(params, TextKind::RightContext, &m.right, &t.right, &d_ctx_in[d..2 * d], grads);
    text_backward(params, TextKind::Sentence, &m.sentence, &t.sentence, &d_ctx_in[2 * d..], grads);
}

fn entity_backward(
    params: &ModelParams,
    e: &EncodedEntity,
    t: &EntityTrace,
    d_enc: &[f64],
    grads: &mut Gradients,
) {
    let d = params.dims.encode_dim;
    let d_top = layer_backward(
        &params.entity_combiner,
        &t.top_input,
        &t.encoding,
        d_enc,
        &mut grads.layers[ENTITY_TOP],
    );
    let (d_doc, d_title) = d_top.split_at(d);
    let d_doc_in = layer_backward(
        &params.entity_doc_combiner,
        &t.doc_input,
        &t.doc,
        d_doc,
        &mut grads.layers[ENTITY_DOC],
    );
    text_backward(params, TextKind::Title, &e.title, &t.title, d_title, grads);
    text_backward(params, TextKind::Paragraph, &e.paragraph, &t.paragraph, &d_doc_in[..d], grads);
    let d_cat = layer_backward(
        &params.category_layer,
        &t.categories.input,
        &t.categories.output,
        &d_doc_in[d..],
        &mut grads.layers[CATEGORY_LAYER],
    );
    scatter_mean(&mut grads.category_table, &e.categories, &d_cat);
}

/// Loss and exact reverse-mode gradients for a softmax batch, a pair batch,
/// or both (multi-task, equal weights).
pub fn backward_batch(
    params: &ModelParams,
    softmax: Option<&SoftmaxBatch<'_>>,
    pairs: Option<&PairBatch<'_>>,
) -> Result<BatchOutcome> {
    let mut grads = Gradients::zeros_like(params);
    let mut softmax_loss = 0.0;
    let mut pair_loss = 0.0;
    let mut similarity = None;

    if let Some(batch) = softmax {
        let fwd = softmax_forward(params, batch)?;
        let out = softmax_loss_and_grad(&fwd.sims, params.softmax_scale)?;
        softmax_loss = out.loss;
        grads.softmax_scale += out.d_scale;
        let b = fwd.sims.size;
        let d = params.dims.encode_dim;
        let mention_units: Vec<_> = fwd.mention_traces.iter().map(|t| unit(&t.encoding)).collect();
        let entity_units: Vec<_> = fwd.entity_traces.iter().map(|t| unit(&t.encoding)).collect();
        let mut d_mentions = vec![vec![0.0; d]; b];
        let mut d_entities = vec![vec![0.0; d]; b];
        for i in 0..b {
            let Some((uh, inv_nu)) = &mention_units[i] else { continue };
            for j in 0..b {
                let Some((vh, inv_nv)) = &entity_units[j] else { continue };
                let g = out.d_sims[i * b + j];
                if g == 0.0 {
                    continue;
                }
                // ds/du = (v^ - s u^) / |u|,  ds/dv = (u^ - s v^) / |v|
                let s = dot(uh, vh);
                axpy(g * inv_nu, vh, &mut d_mentions[i]);
                axpy(-g * s * inv_nu, uh, &mut d_mentions[i]);
                axpy(g * inv_nv, uh, &mut d_entities[j]);
                axpy(-g * s * inv_nv, vh, &mut d_entities[j]);
            }
        }
        for i in 0..b {
            mention_backward(params, batch.mentions[i], &fwd.mention_traces[i], &d_mentions[i], &mut grads);
            entity_backward(params, batch.entities[i], &fwd.entity_traces[i], &d_entities[i], &mut grads);
        }
        similarity = Some(fwd.sims);
    }

    if let Some(batch) = pairs {
        let fwd = pair_forward(params, batch)?;
        let inv_n = 1.0 / fwd.losses.len() as f64;
        for (k, l) in fwd.losses.iter().enumerate() {
            pair_loss += l.loss * inv_n;
            grads.hard_scale += l.d_scale * inv_n;
            grads.hard_offset += l.d_offset * inv_n;
            let Some((uh, vh, inv_nu, inv_nv)) = &fwd.cosines[k].parts else { continue };
            let g = l.d_score * inv_n;
            let s = fwd.cosines[k].value;
            let d_u: Vec<f64> = uh.iter().zip(vh).map(|(u, v)| g * inv_nu * (v - s * u)).collect();
            let d_v: Vec<f64> = uh.iter().zip(vh).map(|(u, v)| g * inv_nv * (u - s * v)).collect();
            mention_backward(params, batch.mentions[k], &fwd.mention_traces[k], &d_u, &mut grads);
            entity_backward(params, batch.entities[k], &fwd.entity_traces[k], &d_v, &mut grads);
        }
    }

    let loss = softmax_loss + pair_loss;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok(BatchOutcome {
        loss,
        softmax_loss,
        pair_loss,
        gradients: grads,
        similarity,
    })
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference check of an arbitrary function against a supplied
/// gradient at `point`. Returns the largest relative error over `samples`
/// random coordinates.
pub fn check_gradient<F>(
    point: &mut [f64],
    analytic: &[f64],
    mut loss: F,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    if point.len() != analytic.len() || point.is_empty() {
        return Err(Error::ShapeMismatch("point and gradient differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let c = rng.gen_range(0..point.len());
        let orig = point[c];
        point[c] = orig + epsilon;
        let plus = loss(point);
        point[c] = orig - epsilon;
        let minus = loss(point);
        point[c] = orig;
        worst = worst.max(relative_error(analytic[c], (plus - minus) / (2.0 * epsilon)));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst error per tensor, in [`TENSOR_NAMES`] order; `None` when no
    /// coordinate of that tensor was probed.
    pub per_tensor: Vec<(&'static str, Option<f64>)>,
    pub coordinates: usize,
    /// Probes discarded because the perturbation flipped a ReLU.
    pub skipped_kinks: usize,
}

/// Compares [`backward_batch`] against central finite differences on
/// `samples` coordinates spread round-robin over every tensor. Embedding
/// rows are drawn from the rows the batch actually reads.
pub fn finite_difference_check(
    params: &ModelParams,
    softmax: Option<&SoftmaxBatch<'_>>,
    pairs: Option<&PairBatch<'_>>,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let analytic = backward_batch(params, softmax, pairs)?.gradients;
    let (_, base_pattern) = forward_loss(params, softmax, pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();

    let mut touched: [BTreeSet<u32>; 3] = Default::default();
    let note_text = |t: &EncodedText, touched: &mut [BTreeSet<u32>; 3]| {
        touched[0].extend(t.unigrams.iter().copied());
        touched[1].extend(t.bigrams.iter().copied());
    };
    let mentions = softmax
        .into_iter()
        .flat_map(|b| b.mentions.iter())
        .chain(pairs.into_iter().flat_map(|b| b.mentions.iter()));
    for m in mentions {
        m.texts().into_iter().for_each(|t| note_text(t, &mut touched));
    }
    let entities = softmax
        .into_iter()
        .flat_map(|b| b.entities.iter())
        .chain(pairs.into_iter().flat_map(|b| b.entities.iter()));
    for e in entities {
        e.texts().into_iter().for_each(|t| note_text(t, &mut touched));
        touched[2].extend(e.categories.iter().copied());
    }
    let touched: Vec<Vec<u32>> = touched.into_iter().map(|s| s.into_iter().collect()).collect();

    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut per_tensor: Vec<Option<f64>> = vec![None; TENSOR_COUNT];
    let mut skipped = 0usize;
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < samples {
        attempts += 1;
        if attempts > samples * 50 {
            return Err(Error::InvalidConfig(
                "too many finite-difference probes crossed ReLU kinks".into(),
            ));
        }
        let tensor = done % TENSOR_COUNT;
        let coord = if tensor < TABLE_TENSORS {
            let rows = &touched[tensor];
            if rows.is_empty() {
                done += 1;
                continue;
            }
            let width = match tensor {
                0 => params.unigram_table.width,
                1 => params.bigram_table.width,
                _ => params.category_table.width,
            };
            rows[rng.gen_range(0..rows.len())] as usize * width + rng.gen_range(0..width)
        } else {
            rng.gen_range(0..sizes[tensor])
        };

        let orig = probe.tensors()[tensor][coord];
        probe.tensors_mut()[tensor][coord] = orig + epsilon;
        let (plus, p_pat) = forward_loss(&probe, softmax, pairs)?;
        probe.tensors_mut()[tensor][coord] = orig - epsilon;
        let (minus, m_pat) = forward_loss(&probe, softmax, pairs)?;
        probe.tensors_mut()[tensor][coord] = orig;
        if p_pat != base_pattern || m_pat != base_pattern {
            skipped += 1;
            continue;
        }
        let err = relative_error(analytic.value(tensor, coord), (plus - minus) / (2.0 * epsilon));
        let slot = &mut per_tensor[tensor];
        *slot = Some(slot.map_or(err, |e: f64| e.max(err)));
        done += 1;
    }
    let max_relative_error = per_tensor.iter().flatten().fold(0.0f64, |m, &e| m.max(e));
    Ok(GradCheckReport {
        max_relative_error,
        per_tensor: TENSOR_NAMES.iter().copied().zip(per_tensor).collect(),
        coordinates: done,
        skipped_kinks: skipped,
    })
}

/// Every parameter drawn from `U(-scale, scale)`, with `a = a_h = 1`.
/// Unlike [`ModelParams::init`] the biases are nonzero too.
pub fn random_model(dims: ModelDims, scale: f64, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(dims);
    for tensor in params.tensors_mut() {
        tensor.iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale));
    }
    params.softmax_scale = 1.0;
    params.hard_scale = 1.0;
    params
}

/// Gradient check on a small random model: a 12-entity synthetic corpus,
/// `E = D = dims`, one softmax batch of 4 and one pair batch of 4.
pub fn random_gradcheck(dims: usize, samples: usize, epsilon: f64, seed: u64) -> Result<GradCheckReport> {
    use crate::corpus::{generate_synthetic, mention_examples, SyntheticConfig};
    use crate::features::build_corpus_vocabulary;
    use crate::model::ModelConfig;

    if dims == 0 {
        return Err(Error::InvalidConfig("dims must be positive".into()));
    }
    let corpus = SyntheticConfig {
        entities: 12,
        families: 4,
        mentions_per_entity: 2,
        ..SyntheticConfig::default()
    };
    let (catalog, docs) = generate_synthetic(&corpus, seed)?;
    let examples = mention_examples(&docs, &catalog)?;
    let vocab = build_corpus_vocabulary(&examples, catalog.records(), 10_000, 16)?;
    let config = ModelConfig {
        embed_dim: dims,
        encode_dim: dims,
        category_rows: 16,
    };
    let split = CorpusSplit {
        train: examples,
        heldout: Vec::new(),
        holdout_fraction: 0.0,
    };
    let data = TrainingData::prepare(&split, &catalog, &vocab, config.category_rows)?;
    let params = random_model(ModelDims::new(&config, &vocab), 0.5, seed);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let picked = DistinctBatcher::new(data.train.len()).next(&data.train_gold, 4, &mut rng);
    let softmax = SoftmaxBatch {
        mentions: picked.iter().map(|&i| &data.train[i]).collect(),
        entities: picked.iter().map(|&i| &data.entities[data.train_gold[i]]).collect(),
    };
    let pairs: Vec<HardPair> = picked
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let gold = data.train_gold[i];
            let entity = if k % 2 == 0 { gold } else { (gold + 1 + k) % data.entities.len() };
            HardPair { mention: i, entity, label: entity == gold }
        })
        .collect();
    let pair_batch = PairBatch {
        mentions: pairs.iter().map(|p| &data.train[p.mention]).collect(),
        entities: pairs.iter().map(|p| &data.entities[p.entity]).collect(),
        labels: pairs.iter().map(|p| p.label).collect(),
    };
    finite_difference_check(&params, Some(&softmax), Some(&pair_batch), epsilon, samples, seed)
}

/// Momentum buffers, one dense slot per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub tensors: Vec<Vec<f64>>,
}

impl Velocity {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// `v <- mu v + g; p <- p - lr v` over every parameter.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &Gradients,
    velocity: &mut Velocity,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if velocity.tensors.len() != tensors.len()
        || velocity.tensors.iter().zip(&tensors).any(|(v, p)| v.len() != p.len())
        || grads.layers.len() != LAYER_COUNT
    {
        return Err(Error::ShapeMismatch("velocity does not match parameters".into()));
    }
    for (t, (p, v)) in tensors.iter_mut().zip(velocity.tensors.iter_mut()).enumerate() {
        if t < TABLE_TENSORS {
            let table = grads.table(t);
            v.iter_mut().for_each(|x| *x *= momentum);
            for (&row, g) in &table.rows {
                let at = row as usize * table.width;
                axpy(1.0, g, &mut v[at..at + table.width]);
            }
        } else {
            let g = grads.dense(t);
            if g.len() != v.len() {
                return Err(Error::ShapeMismatch(format!("gradient of {}", TENSOR_NAMES[t])));
            }
            for (x, gi) in v.iter_mut().zip(g) {
                *x = momentum * *x + gi;
            }
        }
        axpy(-learning_rate, v, p);
    }
    Ok(())
}

/// Momentum SGD that only touches embedding rows with gradient. Rows left
/// alone for `n` steps are caught up in closed form when next read, which
/// matches [`sgd_momentum_step`] up to rounding.
#[derive(Debug, Clone)]
pub struct MomentumOptimizer {
    learning_rate: f64,
    momentum: f64,
    step: u64,
    velocity: Velocity,
    synced: [Vec<u64>; 3],
}

impl MomentumOptimizer {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            step: 0,
            velocity: Velocity::zeros_like(params),
            synced: [
                vec![0; params.unigram_table.rows],
                vec![0; params.bigram_table.rows],
                vec![0; params.category_table.rows],
            ],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn catch_up(&mut self, params: &mut ModelParams, tensor: usize, row: u32) {
        let missed = self.step - self.synced[tensor][row as usize];
        if missed == 0 {
            return;
        }
        self.synced[tensor][row as usize] = self.step;
        let table = match tensor {
            0 => &mut params.unigram_table,
            1 => &mut params.bigram_table,
            _ => &mut params.category_table,
        };
        let width = table.width;
        let at = row as usize * width;
        let v = &mut self.velocity.tensors[tensor][at..at + width];
        if v.iter().all(|&x| x == 0.0) {
            return;
        }
        let mu = self.momentum;
        let decay = libm::pow(mu, missed as f64);
        // sum_{t=1..n} mu^t
        let travel = if mu == 0.0 { 0.0 } else { mu * (1.0 - decay) / (1.0 - mu) };
        axpy(-self.learning_rate * travel, v, &mut table.data[at..at + width]);
        v.iter_mut().for_each(|x| *x *= decay);
    }

    /// Brings the listed rows of table `tensor` up to date before a read.
    pub fn sync_rows(&mut self, params: &mut ModelParams, tensor: usize, rows: &[u32]) {
        for &row in rows {
            self.catch_up(params, tensor, row);
        }
    }

    pub fn sync_mention(&mut self, params: &mut ModelParams, m: &EncodedMention) {
        for t in m.texts() {
            self.sync_rows(params, 0, &t.unigrams);
            self.sync_rows(params, 1, &t.bigrams);
        }
    }

    pub fn sync_entity(&mut self, params: &mut ModelParams, e: &EncodedEntity) {
        for t in e.texts() {
            self.sync_rows(params, 0, &t.unigrams);
            self.sync_rows(params, 1, &t.bigrams);
        }
        self.sync_rows(params, 2, &e.categories);
    }

    /// Brings every row up to date.
    pub fn flush(&mut self, params: &mut ModelParams) {
        for tensor in 0..TABLE_TENSORS {
            for row in 0..self.synced[tensor].len() {
                self.catch_up(params, tensor, row as u32);
            }
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        for tensor in 0..TABLE_TENSORS {
            for &row in grads.table(tensor).rows.keys() {
                self.catch_up(params, tensor, row);
            }
        }
        self.step += 1;
        let (lr, mu) = (self.learning_rate, self.momentum);
        for tensor in 0..TABLE_TENSORS {
            let table = grads.table(tensor);
            let width = table.width;
            for (&row, g) in &table.rows {
                let at = row as usize * width;
                let v = &mut self.velocity.tensors[tensor][at..at + width];
                for (x, gi) in v.iter_mut().zip(g) {
                    *x = mu * *x + gi;
                }
                let p = &mut params.tensors_mut()[tensor][at..at + width];
                axpy(-lr, v, p);
                self.synced[tensor][row as usize] = self.step;
            }
        }
        let mut tensors = params.tensors_mut();
        for tensor in TABLE_TENSORS..TENSOR_COUNT {
            let v = &mut self.velocity.tensors[tensor];
            for (x, gi) in v.iter_mut().zip(grads.dense(tensor)) {
                *x = mu * *x + gi;
            }
            axpy(-lr, v, tensors[tensor]);
        }
    }
}

/// Fraction of rows whose diagonal strictly beats every other entry.
pub fn inbatch_recall_at_1(sims: &SimilarityMatrix) -> f64 {
    let b = sims.size;
    if b == 0 {
        return 0.0;
    }
    inbatch_hits(sims) as f64 / b as f64
}

fn inbatch_hits(sims: &SimilarityMatrix) -> usize {
    (0..sims.size)
        .filter(|&i| {
            let row = sims.row(i);
            row.iter().enumerate().all(|(j, &s)| j == i || row[i] > s)
        })
        .count()
}

/// Area under the ROC curve in Mann-Whitney form; ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch("scores and labels differ in length".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut wins = 0.0;
    let mut negatives_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        wins += pos as f64 * negatives_below as f64 + 0.5 * (pos * neg) as f64;
        negatives_below += neg;
        i = j;
    }
    Ok(wins / (positives as f64 * negatives as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Evaluations without a heldout gain above [`PLATEAU_DELTA`] before
    /// stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            max_steps: 20_000,
            eval_every: 200,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// A labelled pair for the logistic task, by position in
/// [`TrainingData::train`] and [`TrainingData::entities`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct HardPair {
    pub mention: usize,
    pub entity: usize,
    pub label: bool,
}

/// A corpus resolved to ids once, shared by training, mining and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub entity_ids: Vec<String>,
    pub entities: Vec<EncodedEntity>,
    pub train: Vec<EncodedMention>,
    pub train_gold: Vec<usize>,
    pub heldout: Vec<EncodedMention>,
    pub heldout_gold: Vec<usize>,
}

impl TrainingData {
    pub fn prepare(
        split: &CorpusSplit,
        catalog: &EntityCatalog,
        vocab: &NgramVocabulary,
        category_rows: usize,
    ) -> Result<Self> {
        let resolve = |id: &str| catalog.position(id).ok_or_else(|| Error::UnknownEntity(id.into()));
        let mut data = Self {
            entity_ids: catalog.ids().map(String::from).collect(),
            entities: catalog
                .records()
                .iter()
                .map(|r| EncodedEntity::new(&entity_features(r), vocab, category_rows))
                .collect(),
            train: Vec::with_capacity(split.train.len()),
            train_gold: Vec::with_capacity(split.train.len()),
            heldout: Vec::with_capacity(split.heldout.len()),
            heldout_gold: Vec::with_capacity(split.heldout.len()),
        };
        for ex in &split.train {
            data.train_gold.push(resolve(&ex.gold_entity_id)?);
            data.train.push(EncodedMention::new(&ex.features, vocab));
        }
        for ex in &split.heldout {
            data.heldout_gold.push(resolve(&ex.gold_entity_id)?);
            data.heldout.push(EncodedMention::new(&ex.features, vocab));
        }
        Ok(data)
    }

    pub fn distinct_train_entities(&self) -> usize {
        self.train_gold.iter().collect::<BTreeSet<_>>().len()
    }

    /// Positive pairs: every training mention with its gold entity.
    pub fn positive_pairs(&self) -> Vec<HardPair> {
        self.train_gold
            .iter()
            .enumerate()
            .map(|(mention, &entity)| HardPair {
                mention,
                entity,
                label: true,
            })
            .collect()
    }
}

/// Draws batches whose gold entities are pairwise distinct, so no in-batch
/// negative is secretly a positive. Mentions that would repeat an entity
/// wait for a later batch.
struct DistinctBatcher {
    queue: VecDeque<usize>,
    count: usize,
}

impl DistinctBatcher {
    fn new(count: usize) -> Self {
        Self {
            queue: VecDeque::new(),
            count,
        }
    }

    fn next(&mut self, gold: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        let mut used = BTreeSet::new();
        let mut refills = 0;
        while batch.len() < size {
            let mut kept = VecDeque::with_capacity(self.queue.len());
            while let Some(i) = self.queue.pop_front() {
                if batch.len() < size && used.insert(gold[i]) {
                    batch.push(i);
                } else {
                    kept.push_back(i);
                }
            }
            self.queue = kept;
            if batch.len() < size {
                let mut epoch: Vec<usize> = (0..self.count).collect();
                epoch.shuffle(rng);
                self.queue.extend(epoch);
                refills += 1;
                // Two fresh epochs always suffice once enough entities exist.
                assert!(refills <= 2, "not enough distinct entities for a batch");
            }
        }
        batch
    }
}

/// Fixed heldout batches: seeded shuffle, then first-fit packing into
/// batches of distinct entities. Batches smaller than 2 are dropped.
fn heldout_batches(gold: &[usize], size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..gold.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6c64_6f75_7421));
    let mut batches: Vec<(Vec<usize>, BTreeSet<usize>)> = Vec::new();
    for i in order {
        match batches
            .iter_mut()
            .find(|(b, used)| b.len() < size && !used.contains(&gold[i]))
        {
            Some((b, used)) => {
                b.push(i);
                used.insert(gold[i]);
            }
            None => batches.push((vec![i], [gold[i]].into_iter().collect())),
        }
    }
    batches
        .into_iter()
        .map(|(b, _)| b)
        .filter(|b| b.len() >= 2)
        .collect()
}

/// Heldout in-batch recall@1 over fixed batches; NaN when no batch of at
/// least two distinct entities can be formed.
pub fn heldout_inbatch_recall(params: &ModelParams, data: &TrainingData, batch_size: usize, seed: u64) -> f64 {
    let batches = heldout_batches(&data.heldout_gold, batch_size, seed);
    let (mut hits, mut rows) = (0usize, 0usize);
    for batch in &batches {
        let mentions: Vec<Vec<f64>> = batch
            .iter()
            .map(|&i| params.encode_mention(&data.heldout[i]).0)
            .collect();
        let entities: Vec<Vec<f64>> = batch
            .iter()
            .map(|&i| params.encode_entity(&data.entities[data.heldout_gold[i]]).0)
            .collect();
        let sims = crate::model::similarity_matrix(&mentions, &entities)
            .expect("heldout batches hold at least two pairs");
        hits += inbatch_hits(&sims);
        rows += batch.len();
    }
    if rows == 0 {
        f64::NAN
    } else {
        hits as f64 / rows as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub heldout_r1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub steps: u64,
    pub final_r1: f64,
    pub stopped_early: bool,
}

/// Fresh model trained on the softmax task alone.
pub fn train(
    data: &TrainingData,
    dims: ModelDims,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainingLog)> {
    let params = ModelParams::init(dims, seed);
    resume_training(data, params, config, &[], seed)
}

/// Continues training `params`. With a non-empty `hard_pairs` pool every
/// step adds a uniformly sampled pair batch of the same size to the softmax
/// batch.
pub fn resume_training(
    data: &TrainingData,
    mut params: ModelParams,
    config: &TrainConfig,
    hard_pairs: &[HardPair],
    seed: u64,
) -> Result<(ModelParams, TrainingLog)> {
    config.validate()?;
    let distinct = data.distinct_train_entities();
    if distinct < config.batch_size {
        return Err(Error::TooFewExamples {
            needed: config.batch_size,
            got: distinct,
        });
    }
    for p in hard_pairs {
        if p.mention >= data.train.len() || p.entity >= data.entities.len() {
            return Err(Error::ShapeMismatch("hard pair index out of range".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batcher = DistinctBatcher::new(data.train.len());
    let mut optimizer = MomentumOptimizer::new(&params, config.learning_rate, config.momentum);
    let mut log = TrainingLog::default();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_steps = 0u64;

    while optimizer.steps() < config.max_steps {
        let picked = batcher.next(&data.train_gold, config.batch_size, &mut rng);
        let softmax = SoftmaxBatch {
            mentions: picked.iter().map(|&i| &data.train[i]).collect(),
            entities: picked.iter().map(|&i| &data.entities[data.train_gold[i]]).collect(),
        };
        let pair_batch = (!hard_pairs.is_empty()).then(|| {
            let drawn: Vec<&HardPair> = (0..config.batch_size)
                .map(|_| &hard_pairs[rng.gen_range(0..hard_pairs.len())])
                .collect();
            PairBatch {
                mentions: drawn.iter().map(|p| &data.train[p.mention]).collect(),
                entities: drawn.iter().map(|p| &data.entities[p.entity]).collect(),
                labels: drawn.iter().map(|p| p.label).collect(),
            }
        });
        for m in softmax.mentions.iter().chain(pair_batch.iter().flat_map(|b| b.mentions.iter())) {
            optimizer.sync_mention(&mut params, m);
        }
        for e in softmax.entities.iter().chain(pair_batch.iter().flat_map(|b| b.entities.iter())) {
            optimizer.sync_entity(&mut params, e);
        }

        let outcome = backward_batch(&params, Some(&softmax), pair_batch.as_ref())?;
        optimizer.step(&mut params, &outcome.gradients);
        loss_sum += outcome.loss;
        loss_steps += 1;

        let step = optimizer.steps();
        if step.is_multiple_of(config.eval_every) || step == config.max_steps {
            optimizer.flush(&mut params);
            if let Some(name) = params.first_non_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
            let r1 = heldout_inbatch_recall(&params, data, config.batch_size, seed);
            log.rows.push(LogRow {
                step,
                loss: loss_sum / loss_steps as f64,
                heldout_r1: r1,
            });
            loss_sum = 0.0;
            loss_steps = 0;
            if r1 > best + PLATEAU_DELTA {
                best = r1;
                stale = 0;
            } else if !r1.is_nan() {
                stale += 1;
                if config.patience > 0 && stale >= config.patience {
                    log.stopped_early = step < config.max_steps;
                    break;
                }
            }
        }
    }
    optimizer.flush(&mut params);
    log.steps = optimizer.steps();
    log.final_r1 = heldout_inbatch_recall(&params, data, config.batch_size, seed);
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn uniform(b: usize, value: f64) -> SimilarityMatrix {
        SimilarityMatrix {
            size: b,
            entries: vec![value; b * b],
        }
    }

    #[test]
    fn softmax_uniform_is_ln_b() {
        for b in [2usize, 4, 100] {
            for a in [0.5, 1.0, 7.0] {
                let out = softmax_loss_and_grad(&uniform(b, 0.3), a).unwrap();
                assert!((out.loss - libm::log(b as f64)).abs() < 1e-12);
            }
        }
        let out = softmax_loss_and_grad(&uniform(2, 0.0), 1.0).unwrap();
        assert!((out.d_sims[0] + 0.25).abs() < 1e-15);
        assert!((out.d_sims[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_two_by_two() {
        let sims = SimilarityMatrix::from_rows(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let out = softmax_loss_and_grad(&sims, 1.0).unwrap();
        let expected = -1.0 + libm::log(libm::exp(1.0) + libm::exp(-1.0));
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((expected - 0.126928).abs() < 1e-6);
        assert!(softmax_loss_and_grad(&uniform(1, 0.0), 1.0).is_err());
        let mut bad = uniform(2, 0.0);
        bad.entries[1] = f64::NAN;
        assert!(softmax_loss_and_grad(&bad, 1.0).is_err());
    }

    #[test]
    fn softmax_scale_gradient_matches_difference() {
        let sims = SimilarityMatrix::from_rows(vec![
            vec![0.9, 0.1, -0.3],
            vec![0.2, 0.4, 0.5],
            vec![-0.7, 0.0, 0.6],
        ])
        .unwrap();
        let a = 2.5;
        let out = softmax_loss_and_grad(&sims, a).unwrap();
        let h = 1e-6;
        let numeric = (softmax_loss_and_grad(&sims, a + h).unwrap().loss
            - softmax_loss_and_grad(&sims, a - h).unwrap().loss)
            / (2.0 * h);
        assert!((out.d_scale - numeric).abs() < 1e-8);
    }

    #[test]
    fn logistic_examples() {
        for label in [true, false] {
            let l = logistic_loss_and_grad(0.0, label, 1.0, 0.0);
            assert!((l.loss - core::f64::consts::LN_2).abs() < 1e-15);
        }
        let l = logistic_loss_and_grad(1.0, true, 2.0, -1.0);
        let f = 1.0 / (1.0 + libm::exp(-1.0));
        assert!((f - 0.731059).abs() < 1e-6);
        assert!((l.loss + libm::log(f)).abs() < 1e-12);
        assert!((l.loss - 0.313262).abs() < 1e-6);
        // extreme logits stay finite
        assert!(logistic_loss_and_grad(1.0, false, 800.0, 0.0).loss.is_finite());
    }

    #[test]
    fn sgd_hand_iteration() {
        let v = NgramVocabulary::reserved_only(1).unwrap();
        let dims = ModelDims::new(
            &ModelConfig {
                embed_dim: 1,
                encode_dim: 1,
                category_rows: 1,
            },
            &v,
        );
        let mut p = ModelParams::zeros(dims);
        p.softmax_scale = 0.0;
        let mut g = Gradients::zeros_like(&p);
        g.softmax_scale = 1.0;
        let mut vel = Velocity::zeros_like(&p);
        sgd_momentum_step(&mut p, &g, &mut vel, 0.1, 0.9).unwrap();
        assert!((p.softmax_scale + 0.1).abs() < 1e-15);
        sgd_momentum_step(&mut p, &g, &mut vel, 0.1, 0.9).unwrap();
        assert!((vel.tensors[25][0] - 1.9).abs() < 1e-15);
        assert!((p.softmax_scale + 0.29).abs() < 1e-15);

        let before = p.clone();
        let zero = Gradients::zeros_like(&p);
        let mut still = Velocity::zeros_like(&p);
        sgd_momentum_step(&mut p, &zero, &mut still, 0.1, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn recall_at_1_rules() {
        let id = SimilarityMatrix::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(inbatch_recall_at_1(&id), 1.0);
        assert_eq!(inbatch_recall_at_1(&uniform(3, 0.5)), 0.0);
        let one_wrong = SimilarityMatrix::from_rows(vec![
            vec![0.9, 0.1, 0.0],
            vec![0.8, 0.5, 0.0],
            vec![0.0, 0.2, 0.3],
        ])
        .unwrap();
        assert!((inbatch_recall_at_1(&one_wrong) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_rules() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.5, 0.4], &[true, true]), Err(Error::SingleClass));
    }

    #[test]
    fn check_gradient_is_exact_on_linear_functions() {
        let weights = [0.5, -2.0, 3.25, 1.5];
        let mut point = [1.0, 2.0, -1.0, 4.0];
        let err = check_gradient(
            &mut point,
            &weights,
            |x| x.iter().zip(&weights).map(|(a, b)| a * b).sum(),
            1e-3,
            50,
            1,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
        assert!(check_gradient(&mut point, &weights, |_| 0.0, 0.0, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance_and_row_sums(
            entries in proptest::collection::vec(-1.0f64..1.0, 16),
            shift in -0.5f64..0.5,
            a in 0.1f64..10.0,
        ) {
            let sims = SimilarityMatrix { size: 4, entries: entries.clone() };
            let out = softmax_loss_and_grad(&sims, a).unwrap();
            prop_assert!(out.loss >= 0.0);
            for i in 0..4 {
                let row: f64 = out.d_sims[i * 4..(i + 1) * 4].iter().sum();
                prop_assert!(row.abs() < 1e-9);
            }
            let shifted = SimilarityMatrix {
                size: 4,
                entries: entries.iter().map(|s| s + shift).collect(),
            };
            let moved = softmax_loss_and_grad(&shifted, a).unwrap();
            prop_assert!((moved.loss - out.loss).abs() < 1e-9);
        }

        #[test]
        fn logistic_label_symmetry(s in -1.0f64..1.0, a in -5.0f64..5.0) {
            let l1 = logistic_loss_and_grad(s, true, a, 0.0).loss;
            let l0 = logistic_loss_and_grad(-s, false, a, 0.0).loss;
            prop_assert!((l1 - l0).abs() < 1e-12);
        }
    }
}
