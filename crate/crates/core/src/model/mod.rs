//! Transformer recommenders with auxiliary-information embeddings.
//!
//! Input at position `t` is `E_V[v_t] + E_P[t] + k_{v_t}`. Each block is
//! self-attention followed by a feed-forward network; both sublayers are
//! wrapped as `LayerNorm(x + Dropout(sublayer(x)))` (post-norm, as in the
//! SASRec/BERT4Rec reference implementations). Items are scored by the dot
//! product of the final hidden state with the tied item embedding table.
//!
//! * `SasRecPlus`: one head, causal mask, ReLU point-wise FFN, no output
//!   projection.
//! * `Bert4RecPlus`: `h` heads over `d/h` subspaces joined by `W^O`, padding-only
//!   mask, GELU position-wise FFN.

mod train;

use serde::{Deserialize, Serialize};

use crate::aux::{AuxProjection, AuxTables, FusionConfig};
use crate::dataset::{truncate_pad, ItemId, PADDING};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, ParamId, ParamStore, SeededRng, Tape, Var};

pub use train::{bert_sample, sasrec_sample, train, Batch, BertSample, SasRecSample, TrainOptions, TrainOutcome};

pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SasrecPlus,
    Bert4recPlus,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SasrecPlus => "sasrec_plus",
            Variant::Bert4recPlus => "bert4rec_plus",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Cloze masking probability (bidirectional variant only).
    pub mask_prob: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SasrecPlus,
            layers: 2,
            heads: 1,
            dim: 64,
            max_len: 50,
            dropout: 0.2,
            mask_prob: 0.2,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.layers == 0 {
            return err("layer count must be >= 1".into());
        }
        if self.dim == 0 || self.max_len == 0 || self.heads == 0 || self.batch_size == 0 {
            return err("dim, max_len, heads and batch_size must be >= 1".into());
        }
        if self.dim % self.heads != 0 {
            return err(format!("heads {} do not divide dim {}", self.heads, self.dim));
        }
        if self.variant == Variant::SasrecPlus && self.heads != 1 {
            return err("sasrec_plus is single-head".into());
        }
        if self.variant == Variant::Bert4recPlus && !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return err(format!("mask_prob {} outside (0, 1)", self.mask_prob));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate > 0.0) {
            return err("learning rate must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: Option<ParamId>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Structure of a model: which parameters exist and how they connect.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    variant: Variant,
    num_items: usize,
    dim: usize,
    heads: usize,
    max_len: usize,
    dropout: f64,
    item_emb: ParamId,
    pos_emb: ParamId,
    aux: Option<AuxProjection>,
    blocks: Vec<BlockParams>,
}

/// Attention weights of one forward pass, `[layer][head]`, each `N × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub attention: Vec<Vec<Matrix>>,
    pub hidden: Matrix,
    pub input: Vec<ItemId>,
}

impl ForwardTrace {
    /// `h_t · E_V[v]` for every position and every item `1..=|V|`.
    pub fn scores_all(&self, model: &TransformerModel) -> Matrix {
        let ev = model.store.value(model.net.item_emb);
        let items = Matrix::from_vec(
            model.num_items(),
            ev.cols(),
            ev.as_slice()[ev.cols()..(model.num_items() + 1) * ev.cols()].to_vec(),
        )
        .expect("item table shape");
        self.hidden.matmul_transb(&items).expect("dims")
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect()).expect("shape")
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect()).expect("shape")
}

impl Network {
    fn build(
        config: &ModelConfig,
        num_items: usize,
        fusion: Option<(&FusionConfig, &[usize])>,
        store: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let emb_std = 1.0 / (d as f64).sqrt();
        let mut ev = normal(num_items + 2, d, emb_std, rng);
        ev.row_mut(PADDING).fill(0.0);
        let item_emb = store.add("item_emb", ev);
        let pos_emb = store.add("pos_emb", normal(config.max_len, d, emb_std, rng));
        let aux = match fusion {
            Some((f, dims)) => {
                if f.dim != d {
                    return Err(Error::Config(format!(
                        "fusion dim {} differs from model dim {d}",
                        f.dim
                    )));
                }
                Some(AuxProjection::new(store, f, dims, rng)?)
            }
            None => None,
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| format!("block{l}.{n}");
            blocks.push(BlockParams {
                wq: store.add(p("wq"), xavier(d, d, rng)),
                wk: store.add(p("wk"), xavier(d, d, rng)),
                wv: store.add(p("wv"), xavier(d, d, rng)),
                wo: match config.variant {
                    Variant::SasrecPlus => None,
                    Variant::Bert4recPlus => Some(store.add(p("wo"), xavier(d, d, rng))),
                },
                w1: store.add(p("ffn.w1"), xavier(d, d, rng)),
                b1: store.add(p("ffn.b1"), Matrix::zeros(1, d)),
                w2: store.add(p("ffn.w2"), xavier(d, d, rng)),
                b2: store.add(p("ffn.b2"), Matrix::zeros(1, d)),
                ln1_gain: store.add(p("ln1.gain"), Matrix::filled(1, d, 1.0)),
                ln1_bias: store.add(p("ln1.bias"), Matrix::zeros(1, d)),
                ln2_gain: store.add(p("ln2.gain"), Matrix::filled(1, d, 1.0)),
                ln2_bias: store.add(p("ln2.bias"), Matrix::zeros(1, d)),
            });
        }
        Ok(Self {
            variant: config.variant,
            num_items,
            dim: d,
            heads: config.heads,
            max_len: config.max_len,
            dropout: config.dropout,
            item_emb,
            pos_emb,
            aux,
            blocks,
        })
    }

    fn mask_token(&self) -> ItemId {
        self.num_items + 1
    }

    /// `keep[t * N + s]`: may position `t` attend to position `s`. Padding
    /// keys are hidden from real queries; a padding query sees only itself.
    fn attention_mask(&self, input: &[ItemId]) -> Vec<bool> {
        let n = input.len();
        let mut keep = vec![false; n * n];
        for t in 0..n {
            for s in 0..n {
                let visible = input[s] != PADDING || s == t;
                let causal_ok = self.variant == Variant::Bert4recPlus || s <= t;
                keep[t * n + s] = visible && causal_ok;
            }
        }
        keep
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut SeededRng>) -> Result<Var> {
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.dropout == 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.value(x).shape();
        let scale = 1.0 / (1.0 - self.dropout);
        let mask = (0..r * c)
            .map(|_| if rng.bernoulli(self.dropout) { 0.0 } else { scale })
            .collect();
        tape.mul_const(x, Matrix::from_vec(r, c, mask)?)
    }

    /// `E_V[v_t] + E_P[t] (+ k_{v_t})`; `aux_active[t]` false zeroes `k`.
    fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &[ItemId],
        aux: &AuxTables,
        aux_active: &[bool],
    ) -> Result<Var> {
        if input.len() != self.max_len {
            return Err(Error::Dimension {
                op: "embed_input",
                left: (self.max_len, self.dim),
                right: (input.len(), 1),
            });
        }
        if let Some(&bad) = input.iter().find(|&&i| i > self.mask_token()) {
            return Err(Error::Config(format!(
                "item id {bad} out of range (|V| = {})",
                self.num_items
            )));
        }
        let e = tape.gather(store, self.item_emb, input)?;
        let positions: Vec<usize> = (0..self.max_len).collect();
        let p = tape.gather(store, self.pos_emb, &positions)?;
        let h = tape.add(e, p)?;
        match &self.aux {
            Some(proj) => {
                let k = proj.forward(tape, store, aux, input, aux_active)?;
                tape.add(h, k)
            }
            None => Ok(h),
        }
    }

    /// Records the full forward pass. Dropout is applied iff `rng` is given.
    fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &[ItemId],
        aux: &AuxTables,
        aux_active: &[bool],
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let h0 = self.embed(tape, store, input, aux, aux_active)?;
        let mut h = self.dropout(tape, h0, &mut rng)?;
        let keep = self.attention_mask(input);
        let mut weights = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (layer_w, attn) = self.attention_sublayer(tape, store, b, h, &keep)?;
            weights.push(layer_w);
            let attn = self.dropout(tape, attn, &mut rng)?;
            let res = tape.add(h, attn)?;
            let g1 = tape.param(store, b.ln1_gain);
            let c1 = tape.param(store, b.ln1_bias);
            let h1 = tape.layer_norm(res, g1, c1, LAYER_NORM_EPS)?;

            let f = self.ffn_tape(tape, store, b, h1)?;
            let f = self.dropout(tape, f, &mut rng)?;
            let res = tape.add(h1, f)?;
            let g2 = tape.param(store, b.ln2_gain);
            let c2 = tape.param(store, b.ln2_bias);
            h = tape.layer_norm(res, g2, c2, LAYER_NORM_EPS)?;
        }
        Ok((h, weights))
    }

    /// Self-attention of one block: per-head weights and the joined output.
    fn attention_sublayer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        b: &BlockParams,
        h: Var,
        keep: &[bool],
    ) -> Result<(Vec<Var>, Var)> {
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let wq = tape.param(store, b.wq);
        let wk = tape.param(store, b.wk);
        let wv = tape.param(store, b.wv);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let (qi, ki, vi) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, i * head_dim, head_dim)?,
                    tape.slice_cols(k, i * head_dim, head_dim)?,
                    tape.slice_cols(v, i * head_dim, head_dim)?,
                )
            };
            let (w, o) = attention_tape(tape, qi, ki, vi, keep.to_vec(), scale)?;
            weights.push(w);
            heads.push(o);
        }
        let out = match b.wo {
            Some(wo) => {
                let cat = if heads.len() == 1 {
                    heads[0]
                } else {
                    tape.concat_cols(&heads)?
                };
                let wo = tape.param(store, wo);
                tape.matmul(cat, wo)?
            }
            None => heads[0],
        };
        Ok((weights, out))
    }

    fn activation(&self) -> Activation {
        match self.variant {
            Variant::SasrecPlus => Activation::Relu,
            Variant::Bert4recPlus => Activation::Gelu,
        }
    }

    fn ffn_tape(&self, tape: &mut Tape, store: &ParamStore, b: &BlockParams, x: Var) -> Result<Var> {
        let w = [b.w1, b.b1, b.w2, b.b2].map(|id| tape.param(store, id));
        ffn_vars(tape, x, w, self.activation())
    }

    fn aux_active(&self, input: &[ItemId]) -> Vec<bool> {
        input.iter().map(|&i| i != PADDING && i != self.mask_token()).collect()
    }
}

/// `softmax(Q Kᵀ · scale)` over kept entries, then `· V`. Returns (weights, output).
pub fn attention_tape(tape: &mut Tape, q: Var, k: Var, v: Var, keep: Vec<bool>, scale: f64) -> Result<(Var, Var)> {
    let s = tape.matmul_transb(q, k)?;
    let s = tape.scale(s, scale);
    let w = tape.masked_softmax(s, keep)?;
    let o = tape.matmul(w, v)?;
    Ok((w, o))
}

/// Plain-matrix attention: `weights = softmax(QKᵀ/M)` with masked entries
/// removed, `output = weights · V`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, keep: &[bool], scale_m: f64) -> Result<(Matrix, Matrix)> {
    if !(scale_m > 0.0) {
        return Err(Error::Config(format!("attention scale {scale_m} must be positive")));
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (w, o) = attention_tape(&mut tape, qv, kv, vv, keep.to_vec(), 1.0 / scale_m)?;
    Ok((tape.value(w).clone(), tape.value(o).clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// `act(x W1 + B1) W2 + B2` applied to every row.
fn ffn_vars(tape: &mut Tape, x: Var, [w1, b1, w2, b2]: [Var; 4], act: Activation) -> Result<Var> {
    let z = tape.matmul(x, w1)?;
    let z = tape.add_row(z, b1)?;
    let a = match act {
        Activation::Relu => tape.relu(z),
        Activation::Gelu => tape.gelu(z),
    };
    let o = tape.matmul(a, w2)?;
    tape.add_row(o, b2)
}

/// Row-wise feed-forward network: ReLU for the point-wise SASRec⁺ variant,
/// GELU for the position-wise BERT4Rec⁺ variant.
pub fn feed_forward(x: &Matrix, w1: &Matrix, b1: &Matrix, w2: &Matrix, b2: &Matrix, act: Activation) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = [w1, b1, w2, b2].map(|m| tape.constant(m.clone()));
    let out = ffn_vars(&mut tape, xv, w, act)?;
    Ok(tape.value(out).clone())
}

/// A transformer recommender together with its parameters.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub net: Network,
    pub store: ParamStore,
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub config: ModelConfig,
    pub num_items: usize,
    pub fusion: Option<FusionConfig>,
    pub aux_dims: Vec<usize>,
}

impl TransformerModel {
    /// Fresh model. With `fusion = None` it is the plain SASRec/BERT4Rec
    /// baseline; otherwise projection input dims come from `tables`.
    pub fn new(
        config: &ModelConfig,
        num_items: usize,
        fusion: Option<&FusionConfig>,
        tables: &AuxTables,
    ) -> Result<Self> {
        let dims = match fusion {
            Some(f) => f
                .enabled
                .iter()
                .map(|&m| {
                    tables
                        .get(m)
                        .map(|t| t.dim())
                        .ok_or_else(|| Error::Config(format!("modality {m} enabled but no table loaded")))
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Self::from_header(&ModelHeader {
            config: config.clone(),
            num_items,
            fusion: fusion.cloned(),
            aux_dims: dims,
        })
    }

    pub fn from_header(header: &ModelHeader) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(header.config.seed).derive("model.init");
        let fusion = header.fusion.as_ref().map(|f| (f, header.aux_dims.as_slice()));
        let net = Network::build(&header.config, header.num_items, fusion, &mut store, &mut rng)?;
        Ok(Self {
            config: header.config.clone(),
            net,
            store,
        })
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            config: self.config.clone(),
            num_items: self.net.num_items,
            fusion: self.net.aux.as_ref().map(|a| a.config.clone()),
            aux_dims: self.net.aux.as_ref().map(|a| a.input_dims.clone()).unwrap_or_default(),
        }
    }

    pub fn num_items(&self) -> usize {
        self.net.num_items
    }

    pub fn mask_token(&self) -> ItemId {
        self.net.mask_token()
    }

    pub fn variant(&self) -> Variant {
        self.net.variant
    }

    pub fn has_aux(&self) -> bool {
        self.net.aux.is_some()
    }

    pub fn item_embedding(&self) -> ParamId {
        self.net.item_emb
    }

    pub fn positional_embedding(&self) -> ParamId {
        self.net.pos_emb
    }

    pub fn aux_projection(&self) -> Option<&AuxProjection> {
        self.net.aux.as_ref()
    }

    /// Same parameters without the auxiliary projection: the plain
    /// SASRec/BERT4Rec forward pass.
    pub fn without_aux(&self) -> TransformerModel {
        let mut header = self.header();
        header.fusion = None;
        header.aux_dims.clear();
        let mut plain = Self::from_header(&header).expect("header valid");
        for p in plain.store.iter_mut() {
            let id = self.store.find(&p.name).expect("shared parameter");
            p.value = self.store.value(id).clone();
        }
        plain
    }

    /// Self-attention sublayer of `layer` applied to `h` for the padded
    /// `input` (which fixes the mask): per-head weights and the output,
    /// before residual and normalisation.
    pub fn self_attention(&self, layer: usize, h: &Matrix, input: &[ItemId]) -> Result<(Vec<Matrix>, Matrix)> {
        let b = self
            .net
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))?;
        let keep = self.net.attention_mask(input);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let (w, o) = self.net.attention_sublayer(&mut tape, &self.store, b, hv, &keep)?;
        Ok((
            w.iter().map(|&x| tape.value(x).clone()).collect(),
            tape.value(o).clone(),
        ))
    }

    /// Feed-forward sublayer of `layer` applied to `h`.
    pub fn ffn(&self, layer: usize, h: &Matrix) -> Result<Matrix> {
        let b = self
            .net
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))?;
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let o = self.net.ffn_tape(&mut tape, &self.store, b, hv)?;
        Ok(tape.value(o).clone())
    }

    /// Parameter ids of `layer` in the order wq, wk, wv, wo (if any), w1, b1,
    /// w2, b2, ln1 gain, ln1 bias, ln2 gain, ln2 bias.
    pub fn block_params(&self, layer: usize) -> Vec<ParamId> {
        let b = &self.net.blocks[layer];
        let mut v = vec![b.wq, b.wk, b.wv];
        v.extend(b.wo);
        v.extend([b.w1, b.b1, b.w2, b.b2, b.ln1_gain, b.ln1_bias, b.ln2_gain, b.ln2_bias]);
        v
    }

    /// Attention mask used for `input`, row-major `N × N`, true = attend.
    pub fn attention_mask(&self, input: &[ItemId]) -> Vec<bool> {
        self.net.attention_mask(input)
    }

    /// `H⁰` for a padded input, outside any tape.
    pub fn embed_input(&self, input: &[ItemId], aux: &AuxTables) -> Result<Matrix> {
        let mut tape = Tape::new();
        let active = self.net.aux_active(input);
        let h = self.net.embed(&mut tape, &self.store, input, aux, &active)?;
        Ok(tape.value(h).clone())
    }

    /// Inference forward pass (no dropout) over a padded input of length `N`.
    pub fn forward(&self, input: &[ItemId], aux: &AuxTables) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let active = self.net.aux_active(input);
        let (h, weights) = self
            .net
            .forward_tape(&mut tape, &self.store, input, aux, &active, None)?;
        Ok(ForwardTrace {
            attention: weights
                .iter()
                .map(|layer| layer.iter().map(|&w| tape.value(w).clone()).collect())
                .collect(),
            hidden: tape.value(h).clone(),
            input: input.to_vec(),
        })
    }

    /// The padded model input used to predict the item after `history`.
    pub fn prediction_input(&self, history: &[ItemId]) -> Result<Vec<ItemId>> {
        if history.is_empty() {
            return Err(Error::ColdStart("empty history".into()));
        }
        let n = self.config.max_len;
        Ok(match self.net.variant {
            Variant::SasrecPlus => truncate_pad(history, n),
            Variant::Bert4recPlus => {
                let keep = n - 1;
                let mut seq = history[history.len().saturating_sub(keep)..].to_vec();
                seq.push(self.mask_token());
                truncate_pad(&seq, n)
            }
        })
    }

    /// Next-item scores for `candidates` given `history`: the final position's
    /// hidden state dotted with each candidate's item embedding.
    pub fn predict_next(&self, history: &[ItemId], aux: &AuxTables, candidates: &[ItemId]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Config("empty candidate list".into()));
        }
        let input = self.prediction_input(history)?;
        let trace = self.forward(&input, aux)?;
        let h = trace.hidden.row(self.config.max_len - 1);
        let ev = self.store.value(self.net.item_emb);
        candidates
            .iter()
            .map(|&c| {
                if c == PADDING || c > self.num_items() {
                    Err(Error::Config(format!("candidate {c} is not an item id")))
                } else {
                    Ok(dot(h, ev.row(c)))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
