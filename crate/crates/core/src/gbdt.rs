//! Gradient-boosted regression trees over one-hot encoded item attributes.
//!
//! The ensemble is trained to predict item ratings; its per-tree routed leaf
//! values (scaled by the shrinkage) form the tabular item embedding.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::aux::{Modality, ModalityEmbeddingTable};
use crate::dataset::{Catalog, Interaction, ItemId};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    /// Ordered value vocabulary.
    Categorical(Vec<String>),
    Numeric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    features: Vec<(String, FeatureKind)>,
}

impl TabularSchema {
    pub fn new(features: Vec<(String, FeatureKind)>) -> Result<Self> {
        let mut names = HashSet::new();
        for (name, kind) in &features {
            if !names.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate feature name `{name}`")));
            }
            if let FeatureKind::Categorical(vocab) = kind {
                if vocab.is_empty() {
                    return Err(Error::Config(format!("feature `{name}` has an empty vocabulary")));
                }
                let uniq: HashSet<&String> = vocab.iter().collect();
                if uniq.len() != vocab.len() {
                    return Err(Error::Config(format!("feature `{name}` repeats a vocabulary value")));
                }
            }
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[(String, FeatureKind)] {
        &self.features
    }

    /// Width after one-hot expansion.
    pub fn encoded_width(&self) -> usize {
        self.features
            .iter()
            .map(|(_, k)| match k {
                FeatureKind::Categorical(v) => v.len(),
                FeatureKind::Numeric => 1,
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Cat(String),
    Num(f64),
}

/// One-hot expands categorical features (schema order, then vocabulary
/// order); numeric features pass through.
pub fn one_hot_encode(schema: &TabularSchema, rows: &[Vec<AttrValue>]) -> Result<Matrix> {
    let width = schema.encoded_width();
    let mut out = Matrix::zeros(rows.len(), width);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != schema.features.len() {
            return Err(Error::Dimension {
                op: "one_hot_encode",
                left: (1, schema.features.len()),
                right: (1, row.len()),
            });
        }
        let mut col = 0;
        for ((name, kind), value) in schema.features.iter().zip(row) {
            match (kind, value) {
                (FeatureKind::Categorical(vocab), AttrValue::Cat(v)) => {
                    let pos = vocab.iter().position(|x| x == v).ok_or_else(|| Error::Encoding {
                        feature: name.clone(),
                        value: v.clone(),
                    })?;
                    out.set(r, col + pos, 1.0);
                    col += vocab.len();
                }
                (FeatureKind::Numeric, AttrValue::Num(x)) => {
                    if !x.is_finite() {
                        return Err(Error::Encoding {
                            feature: name.clone(),
                            value: x.to_string(),
                        });
                    }
                    out.set(r, col, *x);
                    col += 1;
                }
                (FeatureKind::Categorical(_), AttrValue::Num(x)) => {
                    return Err(Error::Encoding {
                        feature: name.clone(),
                        value: x.to_string(),
                    })
                }
                (FeatureKind::Numeric, AttrValue::Cat(v)) => {
                    return Err(Error::Encoding {
                        feature: name.clone(),
                        value: v.clone(),
                    })
                }
            }
        }
    }
    Ok(out)
}

/// Reads the item-attribute TSV (header `item_id<TAB>feature…`). Columns are
/// matched to the schema by name; items unknown to `catalog` are skipped.
pub fn load_item_attributes<R: BufRead>(
    source: R,
    schema: &TabularSchema,
    catalog: &Catalog,
) -> Result<Vec<(ItemId, Vec<AttrValue>)>> {
    let mut lines = source.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(Vec::new()),
            Some((_, l)) => {
                let l = l?;
                if !l.trim().is_empty() && !l.starts_with('#') {
                    break l;
                }
            }
        }
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    if cols.first() != Some(&"item_id") {
        return Err(Error::Parse {
            line: 1,
            message: "first header column must be `item_id`".into(),
        });
    }
    let positions = schema
        .features
        .iter()
        .map(|(name, _)| {
            cols.iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("attribute file has no column `{name}`")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::Duplicate(format!("item `{}` at line {line_no}", fields[0])));
        }
        let mut row = Vec::with_capacity(positions.len());
        for ((_, kind), &p) in schema.features.iter().zip(&positions) {
            row.push(match kind {
                FeatureKind::Categorical(_) => AttrValue::Cat(fields[p].to_string()),
                FeatureKind::Numeric => AttrValue::Num(fields[p].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("`{}` is not a number", fields[p]),
                })?),
            });
        }
        if let Some(item) = catalog.item_id(fields[0]) {
            out.push((item, row));
        }
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

pub fn write_item_attributes<W: Write>(
    schema: &TabularSchema,
    rows: &[(ItemId, Vec<AttrValue>)],
    catalog: &Catalog,
    mut w: W,
) -> Result<()> {
    write!(w, "item_id")?;
    for (name, _) in &schema.features {
        write!(w, "\t{name}")?;
    }
    writeln!(w)?;
    for (item, row) in rows {
        write!(w, "{}", catalog.item_raw(*item))?;
        for v in row {
            match v {
                AttrValue::Cat(s) => write!(w, "\t{s}")?,
                AttrValue::Num(x) => write!(w, "\t{x:?}")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Binary regression tree; rows with `x[feature] < threshold` go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![TreeNode::Leaf { value }],
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature] < threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// Best split of a node: `(feature, threshold, gain)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Exact greedy search over all features and all midpoints between
/// consecutive distinct values. Gain is the squared-error reduction; ties keep
/// the earliest (feature, threshold).
pub fn best_split(x: &Matrix, residuals: &[f64], rows: &[usize]) -> Option<SplitChoice> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let total: f64 = rows.iter().map(|&r| residuals[r]).sum();
    let total_sq: f64 = rows.iter().map(|&r| residuals[r] * residuals[r]).sum();
    let parent = total * total / n as f64;
    let tol = 1e-12 * (1.0 + total_sq);
    let mut best: Option<SplitChoice> = None;
    let mut order = rows.to_vec();
    for f in 0..x.cols() {
        order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += residuals[order[k]];
            let (v, next) = (x.get(order[k], f), x.get(order[k + 1], f));
            if v == next {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = (n - k - 1) as f64;
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / nl + right_sum * right_sum / nr - parent;
            if gain > tol && best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: 0.5 * (v + next),
                    gain,
                });
            }
        }
    }
    best
}

/// Fits one tree to `residuals` by recursive exact greedy splitting.
pub fn fit_tree(x: &Matrix, residuals: &[f64], max_depth: usize) -> RegressionTree {
    let rows: Vec<usize> = (0..x.rows()).collect();
    let mut nodes = Vec::new();
    grow(x, residuals, &rows, max_depth, &mut nodes);
    RegressionTree { nodes }
}

fn grow(x: &Matrix, residuals: &[f64], rows: &[usize], depth_left: usize, nodes: &mut Vec<TreeNode>) -> usize {
    let idx = nodes.len();
    let mean = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|&r| residuals[r]).sum::<f64>() / rows.len() as f64
    };
    nodes.push(TreeNode::Leaf { value: mean });
    if depth_left == 0 {
        return idx;
    }
    let Some(split) = best_split(x, residuals, rows) else {
        return idx;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&row| x.get(row, split.feature) < split.threshold);
    let left = grow(x, residuals, &l, depth_left - 1, nodes);
    let right = grow(x, residuals, &r, depth_left - 1, nodes);
    nodes[idx] = TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub trees: Vec<RegressionTree>,
    pub shrinkage: f64,
    pub base_score: f64,
}

impl BoostedEnsemble {
    /// `base_score + Σ_t shrinkage · tree_t(x)`, summed in tree order.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.embed(x).iter().sum::<f64>() + self.base_score
    }

    /// Per-tree shrinkage-scaled routed leaf values.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| self.shrinkage * t.predict(x)).collect()
    }

    pub fn mse(&self, x: &Matrix, y: &[f64]) -> f64 {
        (0..x.rows())
            .map(|r| (self.predict(x.row(r)) - y[r]).powi(2))
            .sum::<f64>()
            / y.len() as f64
    }
}

/// Residual boosting with squared loss.
pub fn fit_ensemble(x: &Matrix, y: &[f64], params: GbdtParams) -> Result<BoostedEnsemble> {
    if params.trees == 0 {
        return Err(Error::Config("ensemble needs at least one tree".into()));
    }
    if !(params.shrinkage > 0.0 && params.shrinkage <= 1.0) {
        return Err(Error::Config(format!("shrinkage {} outside (0, 1]", params.shrinkage)));
    }
    if x.rows() != y.len() || y.is_empty() {
        return Err(Error::Dimension {
            op: "fit_ensemble",
            left: x.shape(),
            right: (y.len(), 1),
        });
    }
    let base_score = y.iter().sum::<f64>() / y.len() as f64;
    let mut ens = BoostedEnsemble {
        trees: Vec::with_capacity(params.trees),
        shrinkage: params.shrinkage,
        base_score,
    };
    let mut pred = vec![base_score; y.len()];
    for _ in 0..params.trees {
        let residuals: Vec<f64> = y.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let tree = fit_tree(x, &residuals, params.max_depth);
        for (r, p) in pred.iter_mut().enumerate() {
            *p += params.shrinkage * tree.predict(x.row(r));
        }
        ens.trees.push(tree);
    }
    Ok(ens)
}

/// Tabular embedding of one encoded item row.
pub fn embed_item(ensemble: &BoostedEnsemble, row: &[f64]) -> Vec<f64> {
    ensemble.embed(row)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub params: GbdtParams,
    pub fold_mae: Vec<f64>,
    pub mean_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub points: Vec<CvPoint>,
    pub chosen: usize,
}

impl CvReport {
    pub fn chosen_params(&self) -> GbdtParams {
        self.points[self.chosen].params
    }
}

pub const CV_FOLDS: usize = 4;

/// Seeded 4-fold assignment: a shuffled permutation dealt round-robin.
pub fn fold_assignment(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let mut folds = vec![0; n];
    for (pos, &row) in perm.iter().enumerate() {
        folds[row] = pos % CV_FOLDS;
    }
    folds
}

/// 4-fold cross-validated MAE for every grid point; the minimum wins, ties
/// going to the earliest point.
pub fn cross_validate(x: &Matrix, y: &[f64], grid: &[GbdtParams], rng: &mut SeededRng) -> Result<CvReport> {
    if y.len() < CV_FOLDS {
        return Err(Error::InsufficientData(format!(
            "cross-validation needs at least {CV_FOLDS} rows, got {}",
            y.len()
        )));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let folds = fold_assignment(y.len(), rng);
    let mut points = Vec::with_capacity(grid.len());
    for &params in grid {
        let mut fold_mae = Vec::with_capacity(CV_FOLDS);
        for f in 0..CV_FOLDS {
            let train: Vec<usize> = (0..y.len()).filter(|&r| folds[r] != f).collect();
            let valid: Vec<usize> = (0..y.len()).filter(|&r| folds[r] == f).collect();
            let ens = fit_ensemble(
                &select_rows(x, &train),
                &train.iter().map(|&r| y[r]).collect::<Vec<_>>(),
                params,
            )?;
            let mae = valid.iter().map(|&r| (ens.predict(x.row(r)) - y[r]).abs()).sum::<f64>() / valid.len() as f64;
            fold_mae.push(mae);
        }
        let mean_mae = fold_mae.iter().sum::<f64>() / CV_FOLDS as f64;
        points.push(CvPoint {
            params,
            fold_mae,
            mean_mae,
        });
    }
    let mut chosen = 0;
    for (i, p) in points.iter().enumerate() {
        if p.mean_mae < points[chosen].mean_mae {
            chosen = i;
        }
    }
    Ok(CvReport { points, chosen })
}

pub fn select_rows(x: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), x.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(r));
    }
    out
}

/// Result of the full tabular pipeline.
#[derive(Clone, Debug)]
pub struct TabularEmbedding {
    pub table: ModalityEmbeddingTable,
    pub cv: CvReport,
    pub ensemble: BoostedEnsemble,
    pub train_items: Vec<ItemId>,
    /// MAE on the items held out of the 70% training split.
    pub holdout_mae: Option<f64>,
}

/// Mean rating per item, over interactions that carry a rating.
pub fn mean_item_ratings(interactions: &[Interaction]) -> HashMap<ItemId, f64> {
    let mut acc: HashMap<ItemId, (f64, usize)> = HashMap::new();
    for it in interactions {
        if let Some(r) = it.rating {
            let e = acc.entry(it.item).or_insert((0.0, 0));
            e.0 += r;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// One-hot encode → seeded train split → cross-validate on the training part
/// → refit the chosen point → embed every item.
pub fn tabular_pipeline(
    schema: &TabularSchema,
    attributes: &[(ItemId, Vec<AttrValue>)],
    ratings: &HashMap<ItemId, f64>,
    grid: &[GbdtParams],
    train_fraction: f64,
    rng: &mut SeededRng,
) -> Result<TabularEmbedding> {
    if ratings.is_empty() {
        return Err(Error::Config("no ratings available as GBDT targets".into()));
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1]")));
    }
    let rows: Vec<Vec<AttrValue>> = attributes.iter().map(|(_, r)| r.clone()).collect();
    let x = one_hot_encode(schema, &rows)?;
    let mut labelled: Vec<usize> = (0..attributes.len())
        .filter(|&i| ratings.contains_key(&attributes[i].0))
        .collect();
    rng.shuffle(&mut labelled);
    let n_train = ((labelled.len() as f64) * train_fraction).round() as usize;
    let (train, holdout) = labelled.split_at(n_train.min(labelled.len()));
    let mut train = train.to_vec();
    train.sort_unstable();
    let xt = select_rows(&x, &train);
    let yt: Vec<f64> = train.iter().map(|&i| ratings[&attributes[i].0]).collect();
    let cv = cross_validate(&xt, &yt, grid, rng)?;
    let ensemble = fit_ensemble(&xt, &yt, cv.chosen_params())?;
    let holdout_mae = if holdout.is_empty() {
        None
    } else {
        Some(
            holdout
                .iter()
                .map(|&i| (ensemble.predict(x.row(i)) - ratings[&attributes[i].0]).abs())
                .sum::<f64>()
                / holdout.len() as f64,
        )
    };
    let mut table = ModalityEmbeddingTable::new(Modality::Tabular, ensemble.trees.len());
    for (r, (item, _)) in attributes.iter().enumerate() {
        table.insert(*item, embed_item(&ensemble, x.row(r)))?;
    }
    Ok(TabularEmbedding {
        table,
        cv,
        ensemble,
        train_items: train.iter().map(|&i| attributes[i].0).collect(),
        holdout_mae,
    })
}
