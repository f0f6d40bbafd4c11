//! Non-transformer reference recommenders: popularity, BPR matrix
//! factorisation and translation-based sequential ranking.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{sample_negative, ItemId, SplitDataset, UserSplit};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::numerics::{dot, sigmoid, softplus, Matrix, SeededRng};

/// Item interaction counts over the training prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct PopModel {
    /// Indexed by item id; entry 0 is unused.
    pub counts: Vec<f64>,
}

pub fn poprec_fit(split: &SplitDataset) -> PopModel {
    let mut counts = vec![0.0; split.num_items() + 1];
    for u in &split.users {
        for &i in &u.train {
            counts[i] += 1.0;
        }
    }
    PopModel { counts }
}

impl PopModel {
    pub fn score(&self, candidates: &[ItemId]) -> Vec<f64> {
        candidates
            .iter()
            .map(|&i| self.counts.get(i).copied().unwrap_or(0.0))
            .collect()
    }

    /// All items by descending count, ascending id among equals.
    pub fn ranking(&self) -> Vec<ItemId> {
        let mut ids: Vec<ItemId> = (1..self.counts.len()).collect();
        ids.sort_by(|&a, &b| self.counts[b].total_cmp(&self.counts[a]).then(a.cmp(&b)));
        ids
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tag: "poprec".into(),
            header: "{}".into(),
            params: vec![("counts".into(), Matrix::row_vector(&self.counts))],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_tag(&["poprec"])?;
        Ok(Self {
            counts: ck.param("counts")?.as_slice().to_vec(),
        })
    }
}

impl Scorer for PopModel {
    fn score(&self, _user: &UserSplit, _context: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        Ok(PopModel::score(self, candidates))
    }
}

/// Hyperparameters shared by the two SGD-trained baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub factors: usize,
    pub reg: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            factors: 32,
            reg: 1e-4,
            learning_rate: 0.05,
            epochs: 100,
            init_std: 0.1,
            seed: 42,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 {
            return Err(Error::Config("baseline factors must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.reg >= 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config(
                "baseline learning rate must be positive, reg and init_std non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitTrace {
    /// Mean ranking loss `−ln σ(x⁺ − x⁻)` per triple.
    pub loss: Vec<f64>,
    /// Squared Frobenius norm of the factor matrices (biases excluded) after
    /// the epoch.
    pub factor_norm: Vec<f64>,
}

fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect()).expect("shape")
}

fn train_histories(split: &SplitDataset) -> Vec<HashSet<ItemId>> {
    split.users.iter().map(|u| u.train.iter().copied().collect()).collect()
}

/// `score(u, i) = bias_i + p_u · q_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BprModel {
    pub config: SgdConfig,
    pub user_factors: Matrix,
    pub item_factors: Matrix,
    /// `1 × (|V|+1)`, entry 0 unused.
    pub item_bias: Matrix,
}

impl BprModel {
    pub fn score_one(&self, user: usize, item: ItemId) -> f64 {
        self.item_bias.get(0, item) + dot(self.user_factors.row(user), self.item_factors.row(item))
    }

    pub fn score(&self, user: usize, candidates: &[ItemId]) -> Result<Vec<f64>> {
        if user >= self.user_factors.rows() {
            return Err(Error::ColdStart(format!("user {user} unseen by BPR")));
        }
        candidates
            .iter()
            .map(|&i| {
                if i == 0 || i >= self.item_factors.rows() {
                    Err(Error::Config(format!("candidate {i} is not an item id")))
                } else {
                    Ok(self.score_one(user, i))
                }
            })
            .collect()
    }

    fn sgd_triple(&mut self, u: usize, i: ItemId, j: ItemId, lr: f64, reg: f64) -> f64 {
        let x = self.score_one(u, i) - self.score_one(u, j);
        // d(−ln σ(x))/dx = −σ(−x)
        let g = -sigmoid(-x);
        let f = self.user_factors.cols();
        for k in 0..f {
            let pu = self.user_factors.get(u, k);
            let qi = self.item_factors.get(i, k);
            let qj = self.item_factors.get(j, k);
            self.user_factors.set(u, k, pu - lr * (g * (qi - qj) + 2.0 * reg * pu));
            self.item_factors.set(i, k, qi - lr * (g * pu + 2.0 * reg * qi));
            self.item_factors.set(j, k, qj - lr * (-g * pu + 2.0 * reg * qj));
        }
        let bi = self.item_bias.get(0, i);
        let bj = self.item_bias.get(0, j);
        self.item_bias.set(0, i, bi - lr * (g + 2.0 * reg * bi));
        self.item_bias.set(0, j, bj - lr * (-g + 2.0 * reg * bj));
        softplus(-x)
    }

    fn norm(&self) -> f64 {
        self.user_factors.frobenius_sq() + self.item_factors.frobenius_sq()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tag: "bpr".into(),
            header: serde_json::to_string(&self.config).expect("config serializes"),
            params: vec![
                ("user_factors".into(), self.user_factors.clone()),
                ("item_factors".into(), self.item_factors.clone()),
                ("item_bias".into(), self.item_bias.clone()),
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_tag(&["bpr"])?;
        Ok(Self {
            config: serde_json::from_str(&ck.header).map_err(|e| Error::Checkpoint(format!("bad BPR header: {e}")))?,
            user_factors: ck.param("user_factors")?.clone(),
            item_factors: ck.param("item_factors")?.clone(),
            item_bias: ck.param("item_bias")?.clone(),
        })
    }
}

impl Scorer for BprModel {
    fn score(&self, user: &UserSplit, _context: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        BprModel::score(self, user.user, candidates)
    }
}

/// SGD over one sampled `(u, i⁺, j⁻)` triple per training interaction per
/// epoch, visiting interactions in a fresh seeded order each epoch.
pub fn bpr_fit(split: &SplitDataset, config: &SgdConfig) -> Result<(BprModel, FitTrace)> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed).derive("bpr");
    let (nu, ni, f) = (split.num_users(), split.num_items(), config.factors);
    let mut model = BprModel {
        config: config.clone(),
        user_factors: random_matrix(nu, f, config.init_std, &mut rng),
        item_factors: random_matrix(ni + 1, f, config.init_std, &mut rng),
        item_bias: Matrix::zeros(1, ni + 1),
    };
    model.item_factors.row_mut(0).fill(0.0);
    let hist = train_histories(split);
    let mut pairs: Vec<(usize, usize, ItemId)> = split
        .users
        .iter()
        .enumerate()
        .flat_map(|(k, u)| u.train.iter().map(move |&i| (k, u.user, i)))
        .collect();
    let mut trace = FitTrace::default();
    for _ in 0..config.epochs {
        rng.shuffle(&mut pairs);
        let mut loss = 0.0;
        for &(k, u, i) in &pairs {
            let j = sample_negative(&hist[k], i, ni, &mut rng);
            loss += model.sgd_triple(u, i, j, config.learning_rate, config.reg);
        }
        trace.loss.push(if pairs.is_empty() {
            0.0
        } else {
            loss / pairs.len() as f64
        });
        trace.factor_norm.push(model.norm());
    }
    Ok((model, trace))
}

/// `score(u, i → j) = β_j − ‖γ_i + t + t_u − γ_j‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransRecModel {
    pub config: SgdConfig,
    /// `(|V|+1) × f`, row 0 unused.
    pub gamma: Matrix,
    /// `1 × f`.
    pub global: Matrix,
    /// `|U| × f`.
    pub user_translation: Matrix,
    /// `1 × (|V|+1)`.
    pub beta: Matrix,
    /// Users that had at least one training transition.
    pub trained_users: Vec<bool>,
}

fn project_unit_ball(row: &mut [f64]) {
    let n = dot(row, row).sqrt();
    if n > 1.0 {
        for v in row {
            *v /= n;
        }
    }
}

impl TransRecModel {
    /// `γ_prev + t (+ t_u)`: the translated query point.
    fn query(&self, user: Option<usize>, prev: ItemId) -> Vec<f64> {
        let mut q: Vec<f64> = self
            .gamma
            .row(prev)
            .iter()
            .zip(self.global.row(0))
            .map(|(a, b)| a + b)
            .collect();
        if let Some(u) = user.filter(|&u| self.trained_users.get(u).copied().unwrap_or(false)) {
            for (v, t) in q.iter_mut().zip(self.user_translation.row(u)) {
                *v += t;
            }
        }
        q
    }

    fn score_from(&self, q: &[f64], next: ItemId) -> f64 {
        let g = self.gamma.row(next);
        self.beta.get(0, next) - q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    /// Scores `candidates` as successors of `prev`. Users without a learned
    /// translation fall back to the global translation alone.
    pub fn score(&self, user: usize, prev: ItemId, candidates: &[ItemId]) -> Result<Vec<f64>> {
        let ni = self.gamma.rows();
        if prev == 0 || prev >= ni {
            return Err(Error::Config(format!("previous item {prev} is not an item id")));
        }
        let q = self.query(Some(user), prev);
        candidates
            .iter()
            .map(|&j| {
                if j == 0 || j >= ni {
                    Err(Error::Config(format!("candidate {j} is not an item id")))
                } else {
                    Ok(self.score_from(&q, j))
                }
            })
            .collect()
    }

    fn sgd_pair(&mut self, u: usize, i: ItemId, j: ItemId, k: ItemId, lr: f64, reg: f64) -> f64 {
        let q = self.query(Some(u), i);
        let f = q.len();
        let zj: Vec<f64> = (0..f).map(|d| q[d] - self.gamma.get(j, d)).collect();
        let zk: Vec<f64> = (0..f).map(|d| q[d] - self.gamma.get(k, d)).collect();
        let x = self.score_from(&q, j) - self.score_from(&q, k);
        let g = -sigmoid(-x);
        for d in 0..f {
            // ∂x/∂q = −2 z_j + 2 z_k; ∂x/∂γ_j = 2 z_j; ∂x/∂γ_k = −2 z_k.
            let dq = g * (-2.0 * zj[d] + 2.0 * zk[d]);
            let gi = self.gamma.get(i, d);
            self.gamma.set(i, d, gi - lr * (dq + 2.0 * reg * gi));
            let t = self.global.get(0, d);
            self.global.set(0, d, t - lr * (dq + 2.0 * reg * t));
            let tu = self.user_translation.get(u, d);
            self.user_translation.set(u, d, tu - lr * (dq + 2.0 * reg * tu));
            let gj = self.gamma.get(j, d);
            self.gamma.set(j, d, gj - lr * (g * 2.0 * zj[d] + 2.0 * reg * gj));
            let gk = self.gamma.get(k, d);
            self.gamma.set(k, d, gk - lr * (-g * 2.0 * zk[d] + 2.0 * reg * gk));
        }
        let bj = self.beta.get(0, j);
        self.beta.set(0, j, bj - lr * (g + 2.0 * reg * bj));
        let bk = self.beta.get(0, k);
        self.beta.set(0, k, bk - lr * (-g + 2.0 * reg * bk));
        for item in [i, j, k] {
            project_unit_ball(self.gamma.row_mut(item));
        }
        softplus(-x)
    }

    fn norm(&self) -> f64 {
        self.gamma.frobenius_sq() + self.global.frobenius_sq() + self.user_translation.frobenius_sq()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let trained: Vec<f64> = self.trained_users.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Checkpoint {
            tag: "transrec".into(),
            header: serde_json::to_string(&self.config).expect("config serializes"),
            params: vec![
                ("gamma".into(), self.gamma.clone()),
                ("global".into(), self.global.clone()),
                ("user_translation".into(), self.user_translation.clone()),
                ("beta".into(), self.beta.clone()),
                ("trained_users".into(), Matrix::row_vector(&trained)),
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_tag(&["transrec"])?;
        Ok(Self {
            config: serde_json::from_str(&ck.header)
                .map_err(|e| Error::Checkpoint(format!("bad TransRec header: {e}")))?,
            gamma: ck.param("gamma")?.clone(),
            global: ck.param("global")?.clone(),
            user_translation: ck.param("user_translation")?.clone(),
            beta: ck.param("beta")?.clone(),
            trained_users: ck
                .param("trained_users")?
                .as_slice()
                .iter()
                .map(|&v| v != 0.0)
                .collect(),
        })
    }
}

impl Scorer for TransRecModel {
    fn score(&self, user: &UserSplit, context: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        let &prev = context
            .last()
            .ok_or_else(|| Error::ColdStart(format!("user {} has no context", user.user)))?;
        TransRecModel::score(self, user.user, prev, candidates)
    }
}

/// SGD over consecutive training pairs `i → j⁺` against a sampled `j⁻`,
/// with item embeddings projected onto the unit ball after each update.
pub fn transrec_fit(split: &SplitDataset, config: &SgdConfig) -> Result<(TransRecModel, FitTrace)> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed).derive("transrec");
    let (nu, ni, f) = (split.num_users(), split.num_items(), config.factors);
    let mut gamma = random_matrix(ni + 1, f, config.init_std, &mut rng);
    gamma.row_mut(0).fill(0.0);
    for r in 1..=ni {
        project_unit_ball(gamma.row_mut(r));
    }
    let mut model = TransRecModel {
        config: config.clone(),
        gamma,
        global: Matrix::zeros(1, f),
        user_translation: Matrix::zeros(nu, f),
        beta: Matrix::zeros(1, ni + 1),
        trained_users: vec![false; nu],
    };
    let hist = train_histories(split);
    let mut triples: Vec<(usize, usize, ItemId, ItemId)> = Vec::new();
    for (k, u) in split.users.iter().enumerate() {
        for w in u.train.windows(2) {
            triples.push((k, u.user, w[0], w[1]));
            model.trained_users[u.user] = true;
        }
    }
    let mut trace = FitTrace::default();
    for _ in 0..config.epochs {
        rng.shuffle(&mut triples);
        let mut loss = 0.0;
        for &(k, u, i, j) in &triples {
            let neg = sample_negative(&hist[k], j, ni, &mut rng);
            loss += model.sgd_pair(u, i, j, neg, config.learning_rate, config.reg);
        }
        trace.loss.push(if triples.is_empty() {
            0.0
        } else {
            loss / triples.len() as f64
        });
        trace.factor_norm.push(model.norm());
    }
    Ok((model, trace))
}
