use std::collections::HashSet;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::aux::{FusionMode, Modality, ModalityEmbeddingTable};
use crate::dataset::{Catalog, SplitDataset, UserSplit};
use crate::numerics::{finite_diff_gradient, max_relative_error};

fn tables(items: usize, seed: u64) -> AuxTables {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    for (m, dim) in [(Modality::Text, 5), (Modality::Image, 3)] {
        let mut t = ModalityEmbeddingTable::new(m, dim);
        for i in 1..=items {
            t.insert(i, (0..dim).map(|_| rng.normal()).collect()).unwrap();
        }
        out.push(t);
    }
    AuxTables::new(out).unwrap()
}

fn tiny(variant: Variant, mode: FusionMode) -> (TransformerModel, AuxTables) {
    let cfg = ModelConfig {
        variant,
        layers: 1,
        heads: if variant == Variant::Bert4recPlus { 2 } else { 1 },
        dim: 8,
        max_len: 6,
        dropout: 0.2,
        seed: 3,
        ..ModelConfig::default()
    };
    let aux = tables(10, 11);
    let fusion = FusionConfig::new(mode, &[Modality::Text, Modality::Image], 8).unwrap();
    let mut model = TransformerModel::new(&cfg, 10, Some(&fusion), &aux).unwrap();
    // Non-zero biases and layer-norm parameters so every path is exercised.
    let mut rng = SeededRng::new(99);
    for p in model.store.iter_mut() {
        let block = p.name.starts_with("block");
        if block && (p.name.contains("bias") || p.name.contains(".b") || p.name.contains("gain")) {
            for v in p.value.as_mut_slice() {
                *v += 0.1 * rng.normal();
            }
        }
    }
    (model, aux)
}

fn input_of(items: &[ItemId], n: usize) -> Vec<ItemId> {
    truncate_pad(items, n)
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    c.layers = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = ModelConfig {
        variant: Variant::Bert4recPlus,
        heads: 3,
        ..ModelConfig::default()
    };
    assert!(c.validate().is_err());
    c.heads = 2;
    c.mask_prob = 0.0;
    assert!(c.validate().is_err());
    c.mask_prob = 0.2;
    assert!(c.validate().is_ok());
    let c = ModelConfig {
        heads: 2,
        ..ModelConfig::default()
    };
    assert!(c.validate().is_err());
}

#[test]
fn attention_examples() {
    let i2 = Matrix::identity(2);
    let (w, _) = attention(&i2, &i2, &i2, &[true; 4], 1.0).unwrap();
    assert_abs_diff_eq!(w.get(0, 0), 0.7311, epsilon = 1e-4);
    assert_abs_diff_eq!(w.get(0, 1), 0.2689, epsilon = 1e-4);

    let q = Matrix::zeros(3, 2);
    let k = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]]);
    let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
    let keep = [true, true, false, true, true, true, false, false, true];
    let (w, o) = attention(&q, &k, &v, &keep, 2.0).unwrap();
    assert_abs_diff_eq!(w.get(0, 0), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(w.get(1, 2), 1.0 / 3.0, epsilon = 1e-15);
    // Row 2 sees only key 2: its output is value row 2.
    assert_eq!(o.row(2), v.row(2));
    assert!(matches!(
        attention(&q, &k, &v, &[false; 9], 1.0),
        Err(Error::DegenerateMask { row: 0 })
    ));
    assert!(attention(&q, &k, &v, &keep, 0.0).is_err());
}

#[test]
fn ffn_examples() {
    let x = Matrix::from_rows(&[vec![0.5, 1.0, 0.0, 2.0]]);
    let z = Matrix::zeros(4, 4);
    let zb = Matrix::zeros(1, 4);
    for act in [Activation::Relu, Activation::Gelu] {
        assert_eq!(feed_forward(&x, &z, &zb, &z, &zb, act).unwrap(), Matrix::zeros(1, 4));
    }
    let i = Matrix::identity(4);
    assert_eq!(feed_forward(&x, &i, &zb, &i, &zb, Activation::Relu).unwrap(), x);
    let g = feed_forward(&x, &i, &zb, &i, &zb, Activation::Gelu).unwrap();
    for (a, b) in g.row(0).iter().zip(x.row(0)) {
        assert_abs_diff_eq!(*a, crate::numerics::gelu(*b), epsilon = 1e-15);
    }
    assert_eq!(g.get(0, 2), 0.0);

    // Random case against a hand-composed oracle.
    let mut rng = SeededRng::new(1);
    let mut r = |n, m| Matrix::from_vec(n, m, (0..n * m).map(|_| rng.normal()).collect()).unwrap();
    let (x, w1, b1, w2, b2) = (r(3, 4), r(4, 4), r(1, 4), r(4, 4), r(1, 4));
    let got = feed_forward(&x, &w1, &b1, &w2, &b2, Activation::Relu).unwrap();
    for row in 0..3 {
        for j in 0..4 {
            let mut acc = b2.get(0, j);
            for k in 0..4 {
                let mut z = b1.get(0, k);
                for m in 0..4 {
                    z += x.get(row, m) * w1.get(m, k);
                }
                acc += z.max(0.0) * w2.get(k, j);
            }
            assert_abs_diff_eq!(got.get(row, j), acc, epsilon = 1e-12);
        }
    }
}

#[test]
fn embedding_examples() {
    let (mut model, aux) = tiny(Variant::SasrecPlus, FusionMode::Concat);
    let pos = model.positional_embedding();
    model.store.get_mut(pos).value.fill(0.0);
    let h0 = model.embed_input(&[0; 6], &aux).unwrap();
    assert!(h0.as_slice().iter().all(|&v| v == 0.0));

    let h = model.embed_input(&input_of(&[4], 6), &aux).unwrap();
    let ev = model.store.value(model.item_embedding()).row(4).to_vec();
    let k = crate::aux::fuse(4, &aux, model.aux_projection().unwrap(), &model.store).unwrap();
    for j in 0..8 {
        assert_abs_diff_eq!(h.get(5, j), ev[j] + k[j], epsilon = 1e-14);
    }
    assert!(model.embed_input(&input_of(&[12], 6), &aux).is_err());
    assert!(model.embed_input(&[1, 2], &aux).is_err());
}

#[test]
fn causal_attention_shape() {
    let (model, aux) = tiny(Variant::SasrecPlus, FusionMode::Sum);
    let input = input_of(&[3, 1, 4, 1, 5], 6);
    let trace = model.forward(&input, &aux).unwrap();
    let w = &trace.attention[0][0];
    for t in 0..6 {
        for s in 0..6 {
            if s > t {
                assert_eq!(w.get(t, s), 0.0);
            }
        }
        assert_abs_diff_eq!(w.row(t).iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }
    // First real position attends only to itself.
    assert_eq!(w.get(1, 1), 1.0);
}

#[test]
fn sasrec_is_causal_bert_is_not() {
    for variant in [Variant::SasrecPlus, Variant::Bert4recPlus] {
        let (model, aux) = tiny(variant, FusionMode::Concat);
        let base = vec![2, 7, 1, 9, 4, 3];
        let a = model.forward(&base, &aux).unwrap().hidden;
        let mut changed = base.clone();
        changed[4] = 8;
        let b = model.forward(&changed, &aux).unwrap().hidden;
        let earlier_same = (0..4).all(|t| a.row(t) == b.row(t));
        assert_eq!(earlier_same, variant == Variant::SasrecPlus, "{variant:?}");
    }
}

#[test]
fn single_head_identity_projection_reduces_to_plain_attention() {
    let cfg = ModelConfig {
        variant: Variant::Bert4recPlus,
        layers: 1,
        heads: 1,
        dim: 4,
        max_len: 3,
        ..ModelConfig::default()
    };
    let mut model = TransformerModel::new(&cfg, 5, None, &AuxTables::empty()).unwrap();
    let ids = model.block_params(0);
    model.store.get_mut(ids[3]).value = Matrix::identity(4);
    let mut rng = SeededRng::new(2);
    let h = Matrix::from_vec(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
    let (w, out) = model.self_attention(0, &h, &[1, 2, 3]).unwrap();
    let q = h.matmul(model.store.value(ids[0])).unwrap();
    let k = h.matmul(model.store.value(ids[1])).unwrap();
    let v = h.matmul(model.store.value(ids[2])).unwrap();
    let (w2, o2) = attention(&q, &k, &v, &[true; 9], 2.0).unwrap();
    assert_eq!(w[0], w2);
    for (a, b) in out.as_slice().iter().zip(o2.as_slice()) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
    }
}

#[test]
fn multi_head_shapes() {
    let (model, aux) = tiny(Variant::Bert4recPlus, FusionMode::Concat);
    let input = input_of(&[1, 2, 3], 6);
    let h = model.embed_input(&input, &aux).unwrap();
    let (w, out) = model.self_attention(0, &h, &input).unwrap();
    assert_eq!(w.len(), 2);
    assert_eq!(out.shape(), (6, 8));
    // Padding keys are hidden from every query but their own.
    for head in &w {
        for t in 0..6 {
            for s in 0..3 {
                if s != t {
                    assert_eq!(head.get(t, s), 0.0);
                }
            }
        }
    }
}

#[test]
fn tied_scores_are_symmetric() {
    let (mut model, aux) = tiny(Variant::SasrecPlus, FusionMode::Concat);
    let ev = model.item_embedding();
    let row = model.store.value(ev).row(2).to_vec();
    model.store.get_mut(ev).value.row_mut(7).copy_from_slice(&row);
    let s = model.predict_next(&[1, 5, 3], &aux, &[2, 7, 2]).unwrap();
    assert_eq!(s[0], s[1]);
    assert_eq!(s[0], s[2]);
    assert!(matches!(model.predict_next(&[], &aux, &[1]), Err(Error::ColdStart(_))));
    assert!(model.predict_next(&[1], &aux, &[0]).is_err());
    assert_eq!(model.predict_next(&[1], &aux, &[4]).unwrap().len(), 1);
}

#[test]
fn zeroed_aux_equals_plain_model() {
    for variant in [Variant::SasrecPlus, Variant::Bert4recPlus] {
        let (model, aux) = tiny(variant, FusionMode::Concat);
        let bias = model.aux_projection().unwrap().bias;
        assert!(model.store.value(bias).as_slice().iter().all(|&v| v == 0.0));
        let zero = aux.zeroed();
        let plain = model.without_aux();
        assert!(!plain.has_aux());
        let input = input_of(&[3, 1, 4, 10], 6);
        assert_eq!(
            model.forward(&input, &zero).unwrap(),
            plain.forward(&input, &AuxTables::empty()).unwrap()
        );
    }
}

fn gradcheck(variant: Variant, mode: FusionMode) -> f64 {
    let (mut model, aux) = tiny(variant, mode);
    let seqs: Vec<Vec<ItemId>> = vec![vec![1, 4, 2, 9, 7], vec![3, 10, 6], vec![5, 8, 2, 1, 6, 3, 4, 9]];
    let hist: Vec<HashSet<ItemId>> = seqs.iter().map(|s| s.iter().copied().collect()).collect();
    let pairs: Vec<(&[ItemId], &HashSet<ItemId>)> = seqs.iter().zip(&hist).map(|(s, h)| (s.as_slice(), h)).collect();
    let batch = model.make_batch(&pairs, &mut SeededRng::new(4));
    let dropout = SeededRng::new(17);
    model.store.zero_grads();
    let net = model.net.clone();
    net.accumulate_gradients(&mut model.store, &batch, &aux, Some(&mut dropout.clone()))
        .unwrap();
    let analytic: Vec<Matrix> = model.store.iter().map(|p| p.grad.clone()).collect();
    let numeric = finite_diff_gradient(&mut model.store, 1e-5, |s| {
        net.batch_loss(s, &batch, &aux, Some(&mut dropout.clone())).unwrap()
    });
    // The padding row is pinned, not differentiated.
    let mut numeric = numeric;
    numeric[model.item_embedding().0].row_mut(0).fill(0.0);
    assert!(analytic.iter().all(|g| g.frobenius_sq() > 0.0) || variant == Variant::Bert4recPlus);
    max_relative_error(&analytic, &numeric, 1e-8)
}

#[test]
fn gradients_match_finite_differences() {
    for variant in [Variant::SasrecPlus, Variant::Bert4recPlus] {
        for mode in [FusionMode::Concat, FusionMode::Sum] {
            let err = gradcheck(variant, mode);
            assert!(err <= 1e-3, "{variant:?} {mode:?}: {err}");
        }
    }
}

#[test]
fn loss_closed_forms() {
    let (mut model, aux) = tiny(Variant::SasrecPlus, FusionMode::Concat);
    model.store.get_mut(model.item_embedding()).value.fill(0.0);
    let s = SasRecSample {
        input: vec![0, 0, 0, 1, 2, 3],
        targets: vec![0, 0, 0, 2, 3, 4],
        negatives: vec![0, 0, 0, 7, 8, 9],
    };
    assert_abs_diff_eq!(
        model.loss_sasrec(&[s], &aux, None).unwrap(),
        2.0 * 2f64.ln(),
        epsilon = 1e-12
    );

    let pad = SasRecSample {
        input: vec![0; 6],
        targets: vec![0; 6],
        negatives: vec![0; 6],
    };
    model.store.zero_grads();
    let loss = model
        .net
        .clone()
        .accumulate_gradients(&mut model.store, &Batch::SasRec(vec![pad]), &aux, None)
        .unwrap();
    assert_eq!(loss, 0.0);
    assert!(model.store.iter().all(|p| p.grad.frobenius_sq() == 0.0));

    let cfg = ModelConfig {
        variant: Variant::Bert4recPlus,
        layers: 1,
        heads: 2,
        dim: 4,
        max_len: 4,
        ..ModelConfig::default()
    };
    let mut bert = TransformerModel::new(&cfg, 2, None, &AuxTables::empty()).unwrap();
    bert.store.get_mut(bert.item_embedding()).value.fill(0.0);
    let s = BertSample {
        input: vec![0, 1, 3, 2],
        masked: vec![2],
        targets: vec![2],
    };
    assert_abs_diff_eq!(
        bert.loss_bert(&[s], &AuxTables::empty(), None).unwrap(),
        2f64.ln(),
        epsilon = 1e-12
    );
}

#[test]
fn masking_rules() {
    let mut rng = SeededRng::new(8);
    let a = bert_sample(&[1, 2, 3], 5, 11, 0.3, &mut rng.clone()).unwrap();
    let b = bert_sample(&[1, 2, 3], 5, 11, 0.3, &mut rng).unwrap();
    assert_eq!(a, b);
    let mut rng = SeededRng::new(0);
    for _ in 0..200 {
        let s = bert_sample(&[4, 5, 6, 7], 6, 11, 0.01, &mut rng).unwrap();
        assert!(!s.masked.is_empty());
        for (&t, &v) in s.masked.iter().zip(&s.targets) {
            assert_eq!(s.input[t], 11);
            assert!(v != PADDING && v != 11);
        }
    }
    assert!(bert_sample(&[], 6, 11, 0.5, &mut rng).is_none());

    let hist: HashSet<ItemId> = [1, 2, 3].into();
    let s = sasrec_sample(&[1, 2, 3], &hist, 50, 4, &mut rng).unwrap();
    assert_eq!(s.input, vec![0, 0, 1, 2]);
    assert_eq!(s.targets, vec![0, 0, 2, 3]);
    assert!(s.negatives[2..].iter().all(|n| !hist.contains(n)));
    assert!(sasrec_sample(&[1], &hist, 50, 4, &mut rng).is_none());
}

fn cyclic_split(users: usize, items: usize, len: usize) -> SplitDataset {
    let mut catalog = Catalog::new();
    for i in 0..items {
        catalog.intern_item(&format!("i{i}"));
    }
    let users = (0..users)
        .map(|u| {
            catalog.intern_user(&format!("u{u}"));
            let seq: Vec<ItemId> = (0..len).map(|t| 1 + (u * 7 + t) % items).collect();
            UserSplit {
                user: u,
                train: seq[..len - 2].to_vec(),
                valid: Some(seq[len - 2]),
                test: Some(seq[len - 1]),
            }
        })
        .collect();
    SplitDataset { catalog, users }
}

#[test]
fn training_contracts() {
    let split = cyclic_split(30, 150, 9);
    let aux = tables(150, 5);
    let fusion = FusionConfig::new(FusionMode::Concat, &[Modality::Text], 16).unwrap();
    for variant in [Variant::SasrecPlus, Variant::Bert4recPlus] {
        let cfg = ModelConfig {
            variant,
            layers: 1,
            heads: if variant == Variant::SasrecPlus { 1 } else { 2 },
            dim: 16,
            max_len: 8,
            epochs: 0,
            batch_size: 8,
            learning_rate: 5e-3,
            dropout: 0.1,
            ..ModelConfig::default()
        };
        let mut m = TransformerModel::new(&cfg, 150, Some(&fusion), &aux).unwrap();
        let init = m.store.clone();
        let out = train(&mut m, &split, &aux, &TrainOptions::default()).unwrap();
        assert!(out.loss_curve.is_empty() && out.best_epoch.is_none());
        assert_eq!(m.store, init);

        let cfg = ModelConfig { epochs: 10, ..cfg };
        let run = || {
            let mut m = TransformerModel::new(&cfg, 150, Some(&fusion), &aux).unwrap();
            let out = train(&mut m, &split, &aux, &TrainOptions::default()).unwrap();
            (m, out)
        };
        let (m1, o1) = run();
        let (m2, o2) = run();
        assert_eq!(m1.store, m2.store);
        assert_eq!(o1, o2);
        assert_eq!(o1.loss_curve.len(), 10);
        assert_eq!(o1.val_ndcg_curve.len(), 10);
        assert!(o1.loss_curve[9] < o1.loss_curve[0], "{variant:?}: {:?}", o1.loss_curve);
        let padding = m1.store.value(m1.item_embedding()).row(0);
        assert!(padding.iter().all(|&v| v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_normalised(seq in prop::collection::vec(0usize..=10, 6)) {
        for variant in [Variant::SasrecPlus, Variant::Bert4recPlus] {
            let (model, aux) = tiny(variant, FusionMode::Concat);
            let trace = model.forward(&seq, &aux).unwrap();
            let keep = model.attention_mask(&seq);
            for head in &trace.attention[0] {
                for t in 0..6 {
                    let row = head.row(t);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    for s in 0..6 {
                        if !keep[t * 6 + s] {
                            prop_assert_eq!(row[s], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn future_positions_never_leak(seq in prop::collection::vec(1usize..=10, 6), t in 0usize..5, repl in 1usize..=10) {
        let (model, aux) = tiny(Variant::SasrecPlus, FusionMode::Sum);
        let a = model.forward(&seq, &aux).unwrap().hidden;
        let mut other = seq.clone();
        for v in other.iter_mut().skip(t + 1) {
            *v = repl;
        }
        let b = model.forward(&other, &aux).unwrap().hidden;
        for r in 0..=t {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }
}
