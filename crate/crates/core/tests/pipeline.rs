use std::io::Cursor;

use mmrec_core::aux::{AuxTables, FusionConfig, FusionMode, Modality};
use mmrec_core::baselines::poprec_fit;
use mmrec_core::checkpoint::Checkpoint;
use mmrec_core::dataset::{
    build_sequences, ingest_interactions, leave_one_out_split, synth_generate, write_interactions, Catalog,
    SplitDataset, SynthConfig, UserSequence, UserSplit,
};
use mmrec_core::eval::{evaluate, EvalConfig, EvalTarget, ModelScorer};
use mmrec_core::model::{train, ModelConfig, TrainOptions, TransformerModel, Variant};
use mmrec_core::{ItemId, Result};

fn small() -> (SplitDataset, AuxTables) {
    let data = synth_generate(&SynthConfig {
        users: 60,
        items: 200,
        categories: 8,
        strength: 1.0,
        text_dim: 4,
        image_dim: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = leave_one_out_split(data.catalog.clone(), &build_sequences(&data.interactions));
    (split, AuxTables::new(data.tables).unwrap())
}

fn model_cfg(variant: Variant, epochs: usize) -> ModelConfig {
    ModelConfig {
        variant,
        dim: 16,
        max_len: 10,
        epochs,
        ..ModelConfig::default()
    }
}

#[test]
fn interactions_survive_a_write_and_reingest() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_interactions(&data.catalog, &data.interactions, &mut buf).unwrap();
    let (catalog, again) = ingest_interactions(Cursor::new(&buf)).unwrap();
    let named = |c: &Catalog, seqs: Vec<UserSequence>| -> Vec<(String, Vec<String>)> {
        seqs.into_iter()
            .map(|s| {
                (
                    c.user_raw(s.user).to_string(),
                    s.items.iter().map(|&i| c.item_raw(i).to_string()).collect(),
                )
            })
            .collect()
    };
    assert_eq!(
        named(&catalog, build_sequences(&again)),
        named(&data.catalog, build_sequences(&data.interactions))
    );
}

#[test]
fn oracle_scorer_is_perfect() {
    let (split, _) = small();
    let oracle = |u: &UserSplit, _: &[ItemId], cands: &[ItemId]| -> Result<Vec<f64>> {
        Ok(cands
            .iter()
            .map(|&c| if Some(c) == u.test { 1.0 } else { 0.0 })
            .collect())
    };
    let r = evaluate(&oracle, &split, EvalTarget::Test, &EvalConfig::default()).unwrap();
    assert_eq!((r.hr_1, r.ndcg_10, r.map), (1.0, 1.0, 1.0));
    assert_eq!(r.users, r.ranks.len());
}

#[test]
fn trained_models_beat_popularity_and_survive_checkpointing() {
    let (split, tables) = small();
    let eval = EvalConfig::default();
    let pop = poprec_fit(&split);
    let pop_score = |_: &UserSplit, _: &[ItemId], cands: &[ItemId]| -> Result<Vec<f64>> { Ok(pop.score(cands)) };
    let baseline = evaluate(&pop_score, &split, EvalTarget::Test, &eval).unwrap().ndcg_10;
    let fusion = FusionConfig::new(FusionMode::Sum, &[Modality::Text, Modality::Image], 16).unwrap();
    for variant in [Variant::SasrecPlus, Variant::Bert4recPlus] {
        let mut model =
            TransformerModel::new(&model_cfg(variant, 40), split.num_items(), Some(&fusion), &tables).unwrap();
        train(&mut model, &split, &tables, &TrainOptions::from_eval(&eval)).unwrap();
        let report = evaluate(
            &ModelScorer {
                model: &model,
                aux: &tables,
            },
            &split,
            EvalTarget::Test,
            &eval,
        )
        .unwrap();
        assert!(
            report.ndcg_10 > baseline,
            "{variant:?}: {} vs popularity {baseline}",
            report.ndcg_10
        );

        let restored =
            TransformerModel::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap())
                .unwrap();
        let again = evaluate(
            &ModelScorer {
                model: &restored,
                aux: &tables,
            },
            &split,
            EvalTarget::Test,
            &eval,
        )
        .unwrap();
        assert_eq!(again.ranks, report.ranks);
    }
}

#[test]
fn unidirectional_hidden_states_ignore_later_positions() {
    let (split, tables) = small();
    let fusion = FusionConfig::new(FusionMode::Concat, &[Modality::Text], 16).unwrap();
    let model = TransformerModel::new(
        &model_cfg(Variant::SasrecPlus, 0),
        split.num_items(),
        Some(&fusion),
        &tables,
    )
    .unwrap();
    let a: Vec<ItemId> = (1..=10).collect();
    let mut b = a.clone();
    b[7] = 40;
    b[9] = 50;
    let ha = model.forward(&a, &tables).unwrap().hidden;
    let hb = model.forward(&b, &tables).unwrap().hidden;
    for t in 0..7 {
        assert_eq!(ha.row(t), hb.row(t), "position {t}");
    }
    assert_ne!(ha.row(7), hb.row(7));
}

#[test]
fn zero_epochs_keep_initial_parameters() {
    let (split, tables) = small();
    let cfg = model_cfg(Variant::Bert4recPlus, 0);
    let mut model = TransformerModel::new(&cfg, split.num_items(), None, &tables).unwrap();
    let before = model.to_checkpoint().to_bytes();
    let out = train(&mut model, &split, &tables, &TrainOptions::default()).unwrap();
    assert!(out.loss_curve.is_empty());
    assert_eq!(model.to_checkpoint().to_bytes(), before);
}
