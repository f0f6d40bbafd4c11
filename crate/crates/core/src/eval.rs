//! Sampled-candidate ranking evaluation, significance testing and the
//! modality ablation grid.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aux::{AuxTables, FusionConfig, FusionMode, Modality};
use crate::dataset::{sample_negatives, ItemId, SplitDataset, UserId, UserSplit};
use crate::error::{Error, Result};
use crate::model::{train, ModelConfig, TrainOptions, TransformerModel, Variant};
use crate::numerics::special::student_t_two_sided_p;
use crate::numerics::SeededRng;

/// Anything that can score candidate items for a user given a context.
pub trait Scorer {
    fn score(&self, user: &UserSplit, context: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>>;
}

impl<F> Scorer for F
where
    F: Fn(&UserSplit, &[ItemId], &[ItemId]) -> Result<Vec<f64>>,
{
    fn score(&self, user: &UserSplit, context: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        self(user, context, candidates)
    }
}

/// Transformer scoring through `predict_next`.
pub struct ModelScorer<'a> {
    pub model: &'a TransformerModel,
    pub aux: &'a AuxTables,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, _user: &UserSplit, context: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        self.model.predict_next(context, self.aux, candidates)
    }
}

/// 1-based rank of `scores[truth]`; ties count against the ground truth.
pub fn rank_ground_truth(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != truth && s >= t)
        .count()
}

pub fn hr_at_n(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_n(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// With a single relevant item this is the reciprocal rank.
pub fn average_precision(rank: usize) -> f64 {
    1.0 / rank as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// Predict the validation item from the training prefix.
    Validation,
    /// Predict the test item from training prefix plus validation item.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negatives: 100,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedQuery {
    pub user: UserId,
    /// Ground truth first, then the sampled negatives.
    pub candidates: Vec<ItemId>,
    pub scores: Vec<f64>,
    pub rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRank {
    pub user: UserId,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub users: usize,
    pub hr_1: f64,
    pub hr_5: f64,
    pub hr_10: f64,
    pub ndcg_5: f64,
    pub ndcg_10: f64,
    pub map: f64,
    pub ranks: Vec<UserRank>,
}

impl MetricReport {
    pub fn from_ranks(ranks: Vec<UserRank>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let n = ranks.len() as f64;
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|r| f(r.rank)).sum::<f64>() / n;
        Ok(Self {
            users: ranks.len(),
            hr_1: mean(&|r| hr_at_n(r, 1)),
            hr_5: mean(&|r| hr_at_n(r, 5)),
            hr_10: mean(&|r| hr_at_n(r, 10)),
            ndcg_5: mean(&|r| ndcg_at_n(r, 5)),
            ndcg_10: mean(&|r| ndcg_at_n(r, 10)),
            map: mean(&|r| average_precision(r)),
            ranks,
        })
    }

    pub fn metrics(&self) -> [(&'static str, f64); 6] {
        [
            ("HR@1", self.hr_1),
            ("HR@5", self.hr_5),
            ("HR@10", self.hr_10),
            ("NDCG@5", self.ndcg_5),
            ("NDCG@10", self.ndcg_10),
            ("MAP", self.map),
        ]
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        for (name, v) in self.metrics() {
            writeln!(s, "{name}\t{v:.6}").unwrap();
        }
        writeln!(s, "users\t{}", self.users).unwrap();
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per user: raw user id, rank, NDCG@10.
    pub fn per_user_tsv(&self, user_name: impl Fn(UserId) -> String) -> String {
        let mut s = String::from("user\trank\tndcg10\n");
        for r in &self.ranks {
            writeln!(s, "{}\t{}\t{:.6}", user_name(r.user), r.rank, ndcg_at_n(r.rank, 10)).unwrap();
        }
        s
    }
}

/// The query for one user, or `None` if the user has no held-out item for
/// `target`.
pub fn user_query(user: &UserSplit, target: EvalTarget) -> Option<(Vec<ItemId>, ItemId)> {
    match target {
        EvalTarget::Validation => user.valid.map(|v| (user.train.clone(), v)),
        EvalTarget::Test => user.test.map(|t| (user.test_context(), t)),
    }
}

/// Ranks the held-out item of `user` against `negatives` sampled items it
/// never interacted with. Negatives depend only on (seed, user).
pub fn rank_user(
    scorer: &dyn Scorer,
    user: &UserSplit,
    num_items: usize,
    target: EvalTarget,
    config: &EvalConfig,
) -> Result<Option<RankedQuery>> {
    let Some((context, truth)) = user_query(user, target) else {
        return Ok(None);
    };
    let mut rng = SeededRng::new(config.seed).derive(&format!("eval.user.{}", user.user));
    let negatives = sample_negatives(user.user, &user.history_set(), num_items, config.negatives, &mut rng)?;
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(truth);
    candidates.extend(negatives);
    let scores = scorer.score(user, &context, &candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Dimension {
            op: "score_candidates",
            left: (candidates.len(), 1),
            right: (scores.len(), 1),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NumericDivergence {
            param: format!("scores for user {}", user.user),
        });
    }
    let rank = rank_ground_truth(&scores, 0);
    Ok(Some(RankedQuery {
        user: user.user,
        candidates,
        scores,
        rank,
    }))
}

/// Full protocol: one ranked query per eligible user, in ascending user order.
pub fn evaluate(
    scorer: &dyn Scorer,
    split: &SplitDataset,
    target: EvalTarget,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let mut users: Vec<&UserSplit> = split.users.iter().collect();
    users.sort_by_key(|u| u.user);
    let mut ranks = Vec::new();
    for u in users {
        if let Some(q) = rank_user(scorer, u, split.num_items(), target, config)? {
            ranks.push(UserRank {
                user: q.user,
                rank: q.rank,
            });
        }
    }
    MetricReport::from_ranks(ranks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub mean_a: f64,
    pub mean_b: f64,
    pub sd_a: f64,
    pub sd_b: f64,
    pub n: usize,
    pub df: usize,
    /// Mean of `b − a`.
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Paired t-test on `d = b − a` with a two-sided Student-t p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestReport> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "paired_t_test",
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "paired t-test needs n >= 2, got {}",
            a.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let (md, sdd) = mean_sd(&d);
    if !(sdd > 0.0) {
        return Err(Error::DegenerateTest);
    }
    let n = a.len();
    let t = md / (sdd / (n as f64).sqrt());
    let (mean_a, sd_a) = mean_sd(a);
    let (mean_b, sd_b) = mean_sd(b);
    Ok(TTestReport {
        mean_a,
        mean_b,
        sd_a,
        sd_b,
        n,
        df: n - 1,
        mean_diff: md,
        t,
        p: student_t_two_sided_p(t, (n - 1) as f64),
    })
}

impl TTestReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("statistic\tvalue\n");
        for (k, v) in [
            ("mean_a", self.mean_a),
            ("mean_b", self.mean_b),
            ("sd_a", self.sd_a),
            ("sd_b", self.sd_b),
            ("mean_diff", self.mean_diff),
            ("t", self.t),
            ("p", self.p),
        ] {
            writeln!(s, "{k}\t{v:.6}").unwrap();
        }
        writeln!(s, "n\t{}\ndf\t{}", self.n, self.df).unwrap();
        s
    }
}

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub fusion: FusionConfig,
}

/// The standard 11 rows: each single modality, then all three and each
/// leave-one-out pair, concatenated and then summed.
pub fn standard_ablation_rows(dim: usize) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(11);
    for m in Modality::ALL {
        rows.push(AblationRow {
            label: m.label().to_string(),
            fusion: FusionConfig::new(FusionMode::Concat, &[m], dim)?,
        });
    }
    for (mode, name) in [(FusionMode::Concat, "Concatenated"), (FusionMode::Sum, "Summation")] {
        rows.push(AblationRow {
            label: format!("{name}: Text + Image + Tabular"),
            fusion: FusionConfig::new(mode, &Modality::ALL, dim)?,
        });
        for drop in [Modality::Tabular, Modality::Image, Modality::Text] {
            let keep: Vec<Modality> = Modality::ALL.into_iter().filter(|&m| m != drop).collect();
            rows.push(AblationRow {
                label: format!("{name}: w/o {}", drop.label()),
                fusion: FusionConfig::new(mode, &keep, dim)?,
            });
        }
    }
    for (i, r) in rows.iter_mut().enumerate() {
        r.label = format!("({}) {}", i + 1, r.label);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mean: f64,
    /// Test NDCG@10 per seed, in seed order.
    pub series: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub labels: Vec<String>,
    /// `cells[row][variant]`.
    pub cells: Vec<Vec<AblationCell>>,
}

impl AblationGrid {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("row");
        for v in &self.variants {
            write!(s, "\t{}", v.name()).unwrap();
        }
        s.push('\n');
        for (label, row) in self.labels.iter().zip(&self.cells) {
            s.push_str(label);
            for c in row {
                write!(s, "\t{:.6}", c.mean).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Per-seed values, one line per (row, variant, seed).
    pub fn series_tsv(&self) -> String {
        let mut s = String::from("row\tvariant\tseed\tndcg10\n");
        for (label, row) in self.labels.iter().zip(&self.cells) {
            for (v, c) in self.variants.iter().zip(row) {
                for (seed, x) in self.seeds.iter().zip(&c.series) {
                    writeln!(s, "{label}\t{}\t{seed}\t{x:.6}", v.name()).unwrap();
                }
            }
        }
        s
    }
}

/// Trains one model per (row, variant, seed) and records test NDCG@10.
/// The seed replaces both the model seed and the evaluation seed, so every
/// cell sees the same candidates for a given seed.
pub fn ablation_run(
    split: &SplitDataset,
    tables: &AuxTables,
    base: &[ModelConfig],
    rows: &[AblationRow],
    seeds: &[u64],
    eval: &EvalConfig,
) -> Result<AblationGrid> {
    if seeds.is_empty() || base.is_empty() || rows.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one row, variant and seed".into(),
        ));
    }
    let mut cells = Vec::with_capacity(rows.len());
    for row in rows {
        let mut row_cells = Vec::with_capacity(base.len());
        for cfg in base {
            let series = seeds
                .iter()
                .map(|&seed| {
                    train_and_test(split, tables, cfg, Some(&row.fusion), seed, eval)
                        .map_err(|e| cell_error(&row.label, cfg.variant, seed, e))
                })
                .collect::<Result<Vec<f64>>>()?;
            row_cells.push(AblationCell {
                mean: series.iter().sum::<f64>() / series.len() as f64,
                series,
            });
        }
        cells.push(row_cells);
    }
    Ok(AblationGrid {
        variants: base.iter().map(|c| c.variant).collect(),
        seeds: seeds.to_vec(),
        labels: rows.iter().map(|r| r.label.clone()).collect(),
        cells,
    })
}

fn cell_error(label: &str, variant: Variant, seed: u64, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(io),
        other => Error::Config(format!(
            "ablation cell [{label} / {} / seed {seed}]: {other}",
            variant.name()
        )),
    }
}

/// Trains `cfg` with `seed` and returns test NDCG@10. `fusion = None` trains
/// the model without auxiliary information.
pub fn train_and_test(
    split: &SplitDataset,
    tables: &AuxTables,
    cfg: &ModelConfig,
    fusion: Option<&FusionConfig>,
    seed: u64,
    eval: &EvalConfig,
) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut model = TransformerModel::new(&cfg, split.num_items(), fusion, tables)?;
    let eval = EvalConfig { seed, ..eval.clone() };
    train(&mut model, split, tables, &TrainOptions::from_eval(&eval))?;
    let report = evaluate(
        &ModelScorer {
            model: &model,
            aux: tables,
        },
        split,
        EvalTarget::Test,
        &eval,
    )?;
    Ok(report.ndcg_10)
}
