mod common;

use deer_core::model::ModelParams;
use deer_core::training::{
    backward_batch, batch_loss, finite_difference_check, random_gradcheck, random_model, sgd_momentum_step, MomentumOptimizer,
    PairBatch, SoftmaxBatch, Velocity,
};
use deer_core::model::TENSOR_COUNT;

fn batches(fx: &common::Fixture) -> (SoftmaxBatch<'_>, PairBatch<'_>) {
    let d = &fx.data;
    let mut picked = Vec::new();
    for (i, g) in d.train_gold.iter().enumerate() {
        if picked.iter().all(|&j: &usize| d.train_gold[j] != *g) {
            picked.push(i);
        }
        if picked.len() == 4 {
            break;
        }
    }
    let softmax = SoftmaxBatch {
        mentions: picked.iter().map(|&i| &d.train[i]).collect(),
        entities: picked.iter().map(|&i| &d.entities[d.train_gold[i]]).collect(),
    };
    let pairs: Vec<(usize, usize, bool)> = vec![(0, d.train_gold[0], true), (1, (d.train_gold[1] + 1) % 12, false), (2, d.train_gold[2], true), (3, (d.train_gold[3] + 4) % 12, false)];
    let pair_batch = PairBatch {
        mentions: pairs.iter().map(|p| &d.train[p.0]).collect(),
        entities: pairs.iter().map(|p| &d.entities[p.1]).collect(),
        labels: pairs.iter().map(|p| p.2).collect(),
    };
    (softmax, pair_batch)
}

fn model(fx: &common::Fixture) -> ModelParams {
    let mut p = random_model(fx.dims, 0.5, 9);
    p.hard_offset = -0.3;
    p
}

#[test]
fn multitask_gradients_match_finite_differences() {
    let fx = common::tiny();
    let p = model(&fx);
    let (softmax, pairs) = batches(&fx);
    let report = finite_difference_check(&p, Some(&softmax), Some(&pairs), 1e-4, 280, 3).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
    assert_eq!(report.coordinates, 280);
    assert!(report.per_tensor.iter().all(|(_, e)| e.is_some()), "{report:?}");
}

#[test]
fn single_task_gradients_match_finite_differences() {
    let fx = common::tiny();
    let p = model(&fx);
    let (softmax, pairs) = batches(&fx);
    let only_softmax = finite_difference_check(&p, Some(&softmax), None, 1e-4, 120, 4).unwrap();
    assert!(only_softmax.max_relative_error < 1e-4, "{only_softmax:?}");
    let only_pairs = finite_difference_check(&p, None, Some(&pairs), 1e-4, 120, 5).unwrap();
    assert!(only_pairs.max_relative_error < 1e-4, "{only_pairs:?}");
}

#[test]
fn multitask_loss_is_sum_of_parts() {
    let fx = common::tiny();
    let p = model(&fx);
    let (softmax, pairs) = batches(&fx);
    let both = backward_batch(&p, Some(&softmax), Some(&pairs)).unwrap();
    let a = batch_loss(&p, Some(&softmax), None).unwrap();
    let b = batch_loss(&p, None, Some(&pairs)).unwrap();
    assert!((both.loss - (a + b)).abs() < 1e-12);
    assert!((both.softmax_loss - a).abs() < 1e-12);
    assert!((both.pair_loss - b).abs() < 1e-12);
}

#[test]
fn lazy_momentum_matches_dense_updates() {
    let fx = common::tiny();
    let (softmax, pairs) = batches(&fx);
    let mut dense = model(&fx);
    let mut lazy = dense.clone();
    let mut velocity = Velocity::zeros_like(&dense);
    let mut optimizer = MomentumOptimizer::new(&lazy, 0.05, 0.9);
    for step in 0..6 {
        // alternate batches so some rows sit idle between reads
        let (s, p) = if step % 2 == 0 { (Some(&softmax), None) } else { (None, Some(&pairs)) };
        let g = backward_batch(&dense, s, p).unwrap().gradients;
        sgd_momentum_step(&mut dense, &g, &mut velocity, 0.05, 0.9).unwrap();
        for m in s.iter().flat_map(|b| b.mentions.iter()).chain(p.iter().flat_map(|b| b.mentions.iter())) {
            optimizer.sync_mention(&mut lazy, m);
        }
        for e in s.iter().flat_map(|b| b.entities.iter()).chain(p.iter().flat_map(|b| b.entities.iter())) {
            optimizer.sync_entity(&mut lazy, e);
        }
        let g = backward_batch(&lazy, s, p).unwrap().gradients;
        optimizer.step(&mut lazy, &g);
    }
    optimizer.flush(&mut lazy);
    for t in 0..TENSOR_COUNT {
        for (a, b) in dense.tensors()[t].iter().zip(lazy.tensors()[t]) {
            assert!((a - b).abs() < 1e-12, "tensor {t}: {a} vs {b}");
        }
    }
}

#[test]
fn saturated_batch_has_no_signal() {
    use deer_core::features::NgramVocabulary;
    use deer_core::model::{EncodedEntity, EncodedMention, ModelConfig, ModelDims};
    use deer_core::features::{EntityFeatures, MentionFeatures, TextFeature};
    let vocab = NgramVocabulary::from_entries([(String::from("up"), 2u32), (String::from("down"), 3)], 1).unwrap();
    let dims = ModelDims::new(&ModelConfig { embed_dim: 1, encode_dim: 1, category_rows: 1 }, &vocab);
    let mut p = ModelParams::zeros(dims);
    p.unigram_table.row_mut(2)[0] = 1.0;
    p.unigram_table.row_mut(3)[0] = -1.0;
    p.layers_mut()[0].weights[0] = 1.0; // span, identity passthrough of the unigram mean
    p.layers_mut()[4].weights[0] = 1.0; // title
    p.mention_combiner.weights[1] = 2.0;
    p.mention_combiner.bias[0] = -1.0;
    p.entity_combiner.weights[1] = 2.0;
    p.entity_combiner.bias[0] = -1.0;
    p.softmax_scale = 20.0;
    let text = |w: &str| TextFeature::new(vec![w.to_string()]);
    let empty = TextFeature::new(vec![]);
    let mention = |w| EncodedMention::new(&MentionFeatures { span: text(w), left_context: empty.clone(), right_context: empty.clone(), sentence: empty.clone() }, &vocab);
    let entity = |w| EncodedEntity::new(&EntityFeatures { title: text(w), paragraph: empty.clone(), categories: vec![] }, &vocab, 1);
    let (m1, m2, e1, e2) = (mention("up"), mention("down"), entity("up"), entity("down"));
    let batch = SoftmaxBatch { mentions: vec![&m1, &m2], entities: vec![&e1, &e2] };
    let out = backward_batch(&p, Some(&batch), None).unwrap();
    assert!(out.gradients.squared_norm().sqrt() < 1e-8, "{}", out.gradients.squared_norm());
    assert!(out.loss < 1e-8);
}


#[test]
fn random_gradcheck_covers_every_tensor() {
    for seed in 1..4 {
        let report = random_gradcheck(8, 200, 1e-4, seed).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        assert!(report.per_tensor.iter().all(|(_, e)| e.is_some()));
    }
}
