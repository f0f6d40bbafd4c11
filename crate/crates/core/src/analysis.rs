//! User-context analysis: averaged attention profiles, K-means clustering
//! with an elbow-selected `k`, and cluster-to-cluster similarity heatmaps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aux::AuxTables;
use crate::dataset::{UserId, UserSplit};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TransformerModel};
use crate::numerics::{dot, Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub user: UserId,
    /// Mean attention matrix over layers and heads, row-major `N × N`.
    pub vector: Vec<f64>,
}

/// Mean over layers and heads of the attention weights, flattened row-major.
pub fn mean_attention(trace: &ForwardTrace) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0.0;
    for w in trace.attention.iter().flatten() {
        match acc.as_mut() {
            Some(a) => a.iter_mut().zip(w.as_slice()).for_each(|(x, y)| *x += y),
            None => acc = Some(w.as_slice().to_vec()),
        }
        count += 1.0;
    }
    let mut v = acc.unwrap_or_default();
    if count > 1.0 {
        v.iter_mut().for_each(|x| *x /= count);
    }
    v
}

/// Profile of `user` from one forward pass over the context used for test
/// prediction (training prefix plus validation item).
pub fn extract_profile(model: &TransformerModel, user: &UserSplit, aux: &AuxTables) -> Result<AttentionProfile> {
    let input = model
        .prediction_input(&user.test_context())
        .map_err(|_| Error::ColdStart(format!("user {} has no history", user.user)))?;
    let trace = model.forward(&input, aux)?;
    Ok(AttentionProfile {
        user: user.user,
        vector: mean_attention(&trace),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    /// WCSS after each Lloyd iteration.
    pub history: Vec<f64>,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_seed(points: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.below(points.len())
        };
        centroids.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until assignments stop
/// changing or `max_iter` is reached. An empty cluster is re-seeded at the
/// point farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut SeededRng, max_iter: usize) -> Result<ClusterModel> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!("k = {k} must lie in 1..={}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Config("profiles have unequal lengths".into()));
    }
    let mut centroids = kmeans_pp_seed(points, k, rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignments[a]]);
                        let db = sq_dist(&points[b], &centroids[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centroids[c] = points[far].clone();
                changed = true;
            }
        }
        history.push(wcss(points, &assignments, &centroids));
        if !changed {
            break;
        }
    }
    // Final assignment against the final centroids.
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, &centroids).0;
    }
    let w = wcss(points, &assignments, &centroids);
    Ok(ClusterModel {
        centroids,
        assignments,
        wcss: w,
        history,
    })
}

fn wcss(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Best of `restarts` seeded runs by WCSS (earliest on ties).
pub fn kmeans_best(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    rng: &mut SeededRng,
    max_iter: usize,
) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for _ in 0..restarts.max(1) {
        let m = kmeans(points, k, rng, max_iter)?;
        if best.as_ref().is_none_or(|b| m.wcss < b.wcss) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElbowReport {
    pub k: usize,
    /// `(k, WCSS(k))` over the searched range.
    pub wcss: Vec<(usize, f64)>,
}

/// The interior `k` maximising `WCSS(k−1) − 2·WCSS(k) + WCSS(k+1)`; the
/// smallest such `k` on ties. `curve` must be ordered by consecutive `k`.
pub fn elbow_from_wcss(curve: &[(usize, f64)]) -> Result<usize> {
    if curve.len() < 3 {
        return Err(Error::Config(format!(
            "elbow needs at least 3 values of k, got {}",
            curve.len()
        )));
    }
    let mut best = (curve[1].0, f64::NEG_INFINITY);
    for w in curve.windows(3) {
        let second = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if second > best.1 {
            best = (w[1].0, second);
        }
    }
    Ok(best.0)
}

/// WCSS for each `k` in `ks` (best of `restarts`), then the elbow.
pub fn elbow_select(
    points: &[Vec<f64>],
    ks: std::ops::RangeInclusive<usize>,
    restarts: usize,
    rng: &mut SeededRng,
    max_iter: usize,
) -> Result<ElbowReport> {
    if ks.clone().count() < 3 {
        return Err(Error::Config(format!("k range {ks:?} has fewer than 3 values")));
    }
    let mut curve = Vec::new();
    for k in ks {
        curve.push((k, kmeans_best(points, k, restarts, rng, max_iter)?.wcss));
    }
    Ok(ElbowReport {
        k: elbow_from_wcss(&curve)?,
        wcss: curve,
    })
}

/// Fraction of points whose predicted cluster maps to their true label
/// under the best one-to-one relabelling.
pub fn label_agreement(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if predicted.is_empty() {
        return 1.0;
    }
    let kp = predicted.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0usize; kt]; kp];
    for (&p, &t) in predicted.iter().zip(truth) {
        counts[p][t] += 1;
    }
    // Exhaustive search over injective maps predicted → truth (k is small).
    fn search(row: usize, counts: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if row == counts.len() {
            return 0;
        }
        let mut best = search(row + 1, counts, used);
        for t in 0..used.len() {
            if !used[t] {
                used[t] = true;
                best = best.max(counts[row][t] + search(row + 1, counts, used));
                used[t] = false;
            }
        }
        best
    }
    search(0, &counts, &mut vec![false; kt]) as f64 / predicted.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHeatmap {
    /// Cluster ids in row/column order.
    pub clusters: Vec<usize>,
    /// `cells[i][j]`: cosine of cluster `i` set one with cluster `j` set two.
    pub cells: Matrix,
    /// The two disjoint member sets (profile indices) per cluster.
    pub sets: Vec<(Vec<usize>, Vec<usize>)>,
}

fn mean_of(profiles: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; profiles[idx[0]].len()];
    for &i in idx {
        m.iter_mut().zip(&profiles[i]).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= idx.len() as f64);
    m
}

/// Draws two disjoint random sets of `set_size` members from each listed
/// cluster and compares their mean profiles by cosine similarity.
pub fn heatmap(
    profiles: &[Vec<f64>],
    assignments: &[usize],
    clusters: &[usize],
    set_size: usize,
    rng: &mut SeededRng,
) -> Result<SimilarityHeatmap> {
    if set_size == 0 || clusters.is_empty() {
        return Err(Error::Config(
            "heatmap needs set_size >= 1 and at least one cluster".into(),
        ));
    }
    let mut sets = Vec::with_capacity(clusters.len());
    for &c in clusters {
        let mut members: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == c).collect();
        if members.len() < 2 * set_size {
            return Err(Error::SetSize {
                cluster: c,
                needed: 2 * set_size,
                available: members.len(),
            });
        }
        rng.shuffle(&mut members);
        let one = members[..set_size].to_vec();
        let two = members[set_size..2 * set_size].to_vec();
        sets.push((one, two));
    }
    let k = clusters.len();
    let means: Vec<(Vec<f64>, Vec<f64>)> = sets
        .iter()
        .map(|(a, b)| (mean_of(profiles, a), mean_of(profiles, b)))
        .collect();
    let mut cells = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            cells.set(i, j, cosine_similarity(&means[i].0, &means[j].1));
        }
    }
    Ok(SimilarityHeatmap {
        clusters: clusters.to_vec(),
        cells,
        sets,
    })
}

/// Mean of the diagonal minus mean of the off-diagonal entries.
pub fn block_diagonal_score(m: &Matrix) -> f64 {
    let k = m.rows();
    let diag: f64 = (0..k).map(|i| m.get(i, i)).sum::<f64>() / k as f64;
    if k < 2 {
        return diag;
    }
    let off: f64 = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m.get(i, j))
        .sum();
    diag - off / (k * k - k) as f64
}

/// Row/column label for the `i`-th heatmap cluster: A, B, …, Z, AA, AB, …
pub fn cluster_label(i: usize) -> String {
    let mut s = Vec::new();
    let mut n = i + 1;
    while n > 0 {
        n -= 1;
        s.push(b'A' + (n % 26) as u8);
        n /= 26;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

impl SimilarityHeatmap {
    pub fn to_tsv(&self) -> String {
        let k = self.clusters.len();
        let mut s = String::from("cluster");
        for j in 0..k {
            write!(s, "\t{}", cluster_label(j)).unwrap();
        }
        s.push('\n');
        for i in 0..k {
            s.push_str(&cluster_label(i));
            for j in 0..k {
                write!(s, "\t{:.6}", self.cells.get(i, j)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn planted(k: usize, per: usize, dim: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| 10.0 * rng.normal()).collect())
            .collect();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, m) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(m.iter().map(|x| x + spread * rng.normal()).collect());
                labels.push(c);
            }
        }
        (pts, labels)
    }

    #[test]
    fn kmeans_examples() {
        let (pts, labels) = planted(2, 15, 3, 0.5, 1);
        let mut rng = SeededRng::new(2);
        let one = kmeans(&pts, 1, &mut rng, 50).unwrap();
        let mean = mean_of(&pts, &(0..pts.len()).collect::<Vec<_>>());
        for (a, b) in one.centroids[0].iter().zip(&mean) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        let two = kmeans_best(&pts, 2, 3, &mut rng, 50).unwrap();
        assert_eq!(label_agreement(&two.assignments, &labels), 1.0);
        let all = kmeans(&pts, pts.len(), &mut rng, 50).unwrap();
        assert_abs_diff_eq!(all.wcss, 0.0, epsilon = 1e-18);
        assert!(matches!(
            kmeans(&pts, pts.len() + 1, &mut rng, 10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn elbow_examples() {
        // Equidistant centres: unequal spacing pulls the second difference
        // towards smaller k.
        let mut rng = SeededRng::new(3);
        let pts: Vec<Vec<f64>> = (0..48)
            .map(|i| {
                (0..5)
                    .map(|j| if j == i % 4 { 10.0 } else { 0.0 } + 0.5 * rng.normal())
                    .collect()
            })
            .collect();
        let r = elbow_select(&pts, 2..=8, 5, &mut SeededRng::new(4), 100).unwrap();
        assert_eq!(r.k, 4);
        let r2 = elbow_select(&pts, 2..=8, 5, &mut SeededRng::new(4), 100).unwrap();
        assert_eq!(r, r2);
        let linear: Vec<(usize, f64)> = (2..=8).map(|k| (k, 100.0 - 10.0 * k as f64)).collect();
        assert_eq!(elbow_from_wcss(&linear).unwrap(), 3);
        assert!(elbow_from_wcss(&linear[..2]).is_err());
        assert!(elbow_select(&pts, 2..=3, 1, &mut SeededRng::new(4), 10).is_err());
    }

    #[test]
    fn heatmap_examples() {
        let same = vec![vec![0.2, 0.8]; 8];
        let h = heatmap(&same, &[0, 0, 0, 0, 1, 1, 1, 1], &[0, 1], 2, &mut SeededRng::new(1)).unwrap();
        assert!(h.cells.as_slice().iter().all(|&c| (c - 1.0).abs() < 1e-12));

        let ortho: Vec<Vec<f64>> = (0..6)
            .map(|i| if i < 3 { vec![1.0, 0.0] } else { vec![0.0, 2.0] })
            .collect();
        let h = heatmap(&ortho, &[0, 0, 0, 1, 1, 1], &[0, 1], 1, &mut SeededRng::new(1)).unwrap();
        assert_eq!(h.cells, Matrix::identity(2));
        assert_eq!(block_diagonal_score(&h.cells), 1.0);
        for (a, b) in &h.sets {
            let a: HashSet<_> = a.iter().collect();
            assert!(b.iter().all(|x| !a.contains(x)));
        }
        assert!(matches!(
            heatmap(&ortho, &[0, 0, 0, 1, 1, 1], &[0, 1], 2, &mut SeededRng::new(1)),
            Err(Error::SetSize {
                cluster: 0,
                needed: 4,
                available: 3
            })
        ));
        assert!(h.to_tsv().starts_with("cluster\tA\tB\nA\t1.000000"));
    }

    #[test]
    fn block_diagonal_examples() {
        assert_eq!(block_diagonal_score(&Matrix::identity(3)), 1.0);
        assert_abs_diff_eq!(block_diagonal_score(&Matrix::filled(3, 3, 0.4)), 0.0, epsilon = 1e-15);
        let m = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        assert_abs_diff_eq!(block_diagonal_score(&m), 0.7, epsilon = 1e-15);
        assert_eq!(cluster_label(0), "A");
        assert_eq!(cluster_label(25), "Z");
        assert_eq!(cluster_label(26), "AA");
    }

    #[test]
    fn agreement_uses_best_permutation() {
        assert_eq!(label_agreement(&[1, 1, 0, 0], &[0, 0, 1, 1]), 1.0);
        assert_eq!(label_agreement(&[0, 0, 0, 1], &[0, 0, 1, 1]), 0.75);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn self_cosine_is_one(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            prop_assume!(dot(&v, &v) > 1e-6);
            prop_assert!((cosine_similarity(&v, &v) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn lloyd_never_increases_wcss(seed in 0u64..500, k in 1usize..6) {
            let (pts, _) = planted(3, 6, 2, 3.0, seed);
            let m = kmeans(&pts, k, &mut SeededRng::new(seed), 100).unwrap();
            for w in m.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            prop_assert!(m.wcss <= m.history[0] + 1e-9);
        }
    }
}
