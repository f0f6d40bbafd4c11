//! Training objectives and the epoch loop.
//!
//! SASRec⁺ uses binary cross-entropy between the next item and one sampled
//! negative at every position. BERT4Rec⁺ uses the Cloze objective: random
//! positions are replaced by the mask token (with zero auxiliary embedding)
//! and predicted with a softmax over all items.

use std::collections::HashSet;

use crate::aux::AuxTables;
use crate::dataset::{sample_negative, truncate_pad, ItemId, SplitDataset, PADDING};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalTarget, ModelScorer};
use crate::numerics::{adam_step, AdamState, Matrix, ParamStore, SeededRng, Tape, Var};

use super::{Network, TransformerModel, Variant};

/// One left-padded SASRec⁺ training sequence. `targets[t]` is the item after
/// `input[t]`; `negatives[t]` is a sampled non-interacted item. Positions
/// with a padding target carry no loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SasRecSample {
    pub input: Vec<ItemId>,
    pub targets: Vec<ItemId>,
    pub negatives: Vec<ItemId>,
}

/// One masked BERT4Rec⁺ training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BertSample {
    /// Padded input with masked slots replaced by the mask token.
    pub input: Vec<ItemId>,
    pub masked: Vec<usize>,
    /// Original item at each masked slot.
    pub targets: Vec<ItemId>,
}

/// Builds the shifted input/target pair of `sequence` with one negative per
/// target position. `None` when there is no next item to predict.
pub fn sasrec_sample(
    sequence: &[ItemId],
    history: &HashSet<ItemId>,
    num_items: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Option<SasRecSample> {
    if sequence.len() < 2 {
        return None;
    }
    let input = truncate_pad(&sequence[..sequence.len() - 1], n);
    let targets = truncate_pad(&sequence[1..], n);
    let negatives = targets
        .iter()
        .map(|&t| {
            if t == PADDING {
                PADDING
            } else {
                sample_negative(history, t, num_items, rng)
            }
        })
        .collect();
    Some(SasRecSample {
        input,
        targets,
        negatives,
    })
}

/// Masks each real position of the padded `sequence` with probability `rho`;
/// if none is chosen the last position is masked.
pub fn bert_sample(
    sequence: &[ItemId],
    n: usize,
    mask_token: ItemId,
    rho: f64,
    rng: &mut SeededRng,
) -> Option<BertSample> {
    if sequence.is_empty() {
        return None;
    }
    let mut input = truncate_pad(sequence, n);
    let mut masked = Vec::new();
    for (t, &v) in input.iter().enumerate() {
        if v != PADDING && rng.bernoulli(rho) {
            masked.push(t);
        }
    }
    if masked.is_empty() {
        masked.push(n - 1);
    }
    let targets = masked.iter().map(|&t| input[t]).collect();
    for &t in &masked {
        input[t] = mask_token;
    }
    Some(BertSample { input, masked, targets })
}

/// A batch of either kind of sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    SasRec(Vec<SasRecSample>),
    Bert(Vec<BertSample>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::SasRec(s) => s.len(),
            Batch::Bert(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of loss terms; the batch loss is their mean.
    pub fn loss_terms(&self) -> usize {
        match self {
            Batch::SasRec(s) => s
                .iter()
                .map(|x| x.targets.iter().filter(|&&t| t != PADDING).count())
                .sum(),
            Batch::Bert(s) => s.iter().map(|x| x.masked.len()).sum(),
        }
    }
}

impl Network {
    fn sample_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        i: usize,
        aux: &AuxTables,
        denom: f64,
        rng: Option<&mut SeededRng>,
    ) -> Result<Option<Var>> {
        match batch {
            Batch::SasRec(samples) => {
                let s = &samples[i];
                if self.variant != Variant::SasrecPlus {
                    return Err(Error::Config("BCE batch given to a bidirectional model".into()));
                }
                let active = self.aux_active(&s.input);
                let (h, _) = self.forward_tape(tape, store, &s.input, aux, &active, rng)?;
                let pos_e = tape.gather(store, self.item_emb, &s.targets)?;
                let neg_e = tape.gather(store, self.item_emb, &s.negatives)?;
                let pos = tape.row_dot(h, pos_e)?;
                let neg = tape.row_dot(h, neg_e)?;
                let weight = s
                    .targets
                    .iter()
                    .map(|&t| if t == PADDING { 0.0 } else { 1.0 })
                    .collect();
                Ok(Some(tape.bce_pos_neg(pos, neg, weight, denom)?))
            }
            Batch::Bert(samples) => {
                let s = &samples[i];
                if self.variant != Variant::Bert4recPlus {
                    return Err(Error::Config("Cloze batch given to a unidirectional model".into()));
                }
                if s.masked.is_empty() {
                    return Ok(None);
                }
                let active = self.aux_active(&s.input);
                let (h, _) = self.forward_tape(tape, store, &s.input, aux, &active, rng)?;
                let hm = tape.select_rows(h, &s.masked)?;
                let ev = tape.param(store, self.item_emb);
                let items = tape.slice_rows(ev, 1, self.num_items)?;
                let logits = tape.matmul_transb(hm, items)?;
                let targets: Vec<usize> = s.targets.iter().map(|&t| t - 1).collect();
                Ok(Some(tape.softmax_xent(logits, &targets, denom)?))
            }
        }
    }

    /// Mean loss of `batch` under `store`. Dropout is active iff `rng` is given.
    pub fn batch_loss(
        &self,
        store: &ParamStore,
        batch: &Batch,
        aux: &AuxTables,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<f64> {
        let denom = batch.loss_terms() as f64;
        let mut total = 0.0;
        for i in 0..batch.len() {
            let mut tape = Tape::new();
            if let Some(loss) = self.sample_loss(&mut tape, store, batch, i, aux, denom, rng.as_deref_mut())? {
                total += tape.value(loss).get(0, 0);
            }
        }
        Ok(total)
    }

    /// As [`Network::batch_loss`], also adding the gradient into `store`.
    pub fn accumulate_gradients(
        &self,
        store: &mut ParamStore,
        batch: &Batch,
        aux: &AuxTables,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<f64> {
        let denom = batch.loss_terms() as f64;
        let mut total = 0.0;
        for i in 0..batch.len() {
            let mut tape = Tape::new();
            if let Some(loss) = self.sample_loss(&mut tape, store, batch, i, aux, denom, rng.as_deref_mut())? {
                total += tape.value(loss).get(0, 0);
                tape.backward(loss, store)?;
            }
        }
        // The padding row never reaches the loss; keep it pinned at zero.
        store.get_mut(self.item_emb).grad.row_mut(PADDING).fill(0.0);
        Ok(total)
    }
}

impl TransformerModel {
    pub fn loss_sasrec(&self, batch: &[SasRecSample], aux: &AuxTables, rng: Option<&mut SeededRng>) -> Result<f64> {
        self.net
            .batch_loss(&self.store, &Batch::SasRec(batch.to_vec()), aux, rng)
    }

    pub fn loss_bert(&self, batch: &[BertSample], aux: &AuxTables, rng: Option<&mut SeededRng>) -> Result<f64> {
        self.net.batch_loss(&self.store, &Batch::Bert(batch.to_vec()), aux, rng)
    }

    /// Draws a fresh training batch for `sequences` (negatives or masks).
    pub fn make_batch(&self, sequences: &[(&[ItemId], &HashSet<ItemId>)], rng: &mut SeededRng) -> Batch {
        let n = self.config.max_len;
        match self.variant() {
            Variant::SasrecPlus => Batch::SasRec(
                sequences
                    .iter()
                    .filter_map(|(seq, hist)| sasrec_sample(seq, hist, self.num_items(), n, rng))
                    .collect(),
            ),
            Variant::Bert4recPlus => Batch::Bert(
                sequences
                    .iter()
                    .filter_map(|(seq, _)| bert_sample(seq, n, self.mask_token(), self.config.mask_prob, rng))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Protocol used for per-epoch validation.
    pub eval: EvalConfig,
    pub validate: bool,
}

impl TrainOptions {
    pub fn from_eval(eval: &EvalConfig) -> Self {
        Self {
            eval: eval.clone(),
            validate: true,
        }
    }
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self::from_eval(&EvalConfig::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Validation NDCG@10 per epoch (empty when validation is off or no
    /// user has a validation item).
    pub val_ndcg_curve: Vec<f64>,
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn curves_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\tval_ndcg10\n");
        for (e, l) in self.loss_curve.iter().enumerate() {
            let v = self
                .val_ndcg_curve
                .get(e)
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "NA".into());
            s.push_str(&format!("{}\t{l:.6}\t{v}\n", e + 1));
        }
        s
    }
}

fn snapshot(store: &ParamStore) -> Vec<Matrix> {
    store.iter().map(|p| p.value.clone()).collect()
}

/// Trains on every user's training prefix for `config.epochs` epochs with
/// Adam, validating after each epoch, and leaves `model` holding the
/// parameters of the best validation epoch (earliest on ties).
pub fn train(
    model: &mut TransformerModel,
    split: &SplitDataset,
    aux: &AuxTables,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    if split.num_items() != model.num_items() {
        return Err(Error::Config(format!(
            "model built for {} items, dataset has {}",
            model.num_items(),
            split.num_items()
        )));
    }
    let cfg = model.config.clone();
    let mut adam = AdamState::new(cfg.learning_rate);
    adam.validate()?;
    let mut rng = SeededRng::new(cfg.seed).derive("model.train");
    let histories: Vec<HashSet<ItemId>> = split.users.iter().map(|u| u.train.iter().copied().collect()).collect();
    let min_len = match cfg.variant {
        Variant::SasrecPlus => 2,
        Variant::Bert4recPlus => 1,
    };
    let mut order: Vec<usize> = (0..split.users.len())
        .filter(|&i| split.users[i].train.len() >= min_len)
        .collect();
    let validate = options.validate && split.users.iter().any(|u| u.valid.is_some());

    let mut outcome = TrainOutcome::default();
    let mut best: Option<(f64, Vec<Matrix>)> = None;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut terms = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<(&[ItemId], &HashSet<ItemId>)> = chunk
                .iter()
                .map(|&i| (split.users[i].train.as_slice(), &histories[i]))
                .collect();
            let batch = model.make_batch(&seqs, &mut rng);
            let t = batch.loss_terms();
            if t == 0 {
                continue;
            }
            model.store.zero_grads();
            let loss = model
                .net
                .accumulate_gradients(&mut model.store, &batch, aux, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::NumericDivergence { param: "loss".into() });
            }
            adam_step(&mut model.store, &mut adam)?;
            loss_sum += loss * t as f64;
            terms += t;
        }
        outcome
            .loss_curve
            .push(if terms > 0 { loss_sum / terms as f64 } else { 0.0 });
        if validate {
            let report = evaluate(
                &ModelScorer { model, aux },
                split,
                EvalTarget::Validation,
                &options.eval,
            )?;
            outcome.val_ndcg_curve.push(report.ndcg_10);
            if best.as_ref().is_none_or(|(b, _)| report.ndcg_10 > *b) {
                best = Some((report.ndcg_10, snapshot(&model.store)));
                outcome.best_epoch = Some(epoch);
            }
        }
    }
    match best {
        Some((_, values)) => {
            for (p, v) in model.store.iter_mut().zip(values) {
                p.value = v;
            }
        }
        None if cfg.epochs > 0 => outcome.best_epoch = Some(cfg.epochs - 1),
        None => {}
    }
    Ok(outcome)
}
