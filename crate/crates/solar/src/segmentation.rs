//! Patch segmentation: agglomerative mean-linkage clustering over cosine
//! distance with an adaptive threshold loop, plus segment scoring and the
//! intersection/difference split.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::pairwise_cosine;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentParams {
    pub t_init: f64,
    pub delta_t: f64,
    pub n_iter: usize,
    pub r_max: f64,
    pub k_max: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams { t_init: 0.45, delta_t: 0.05, n_iter: 5, r_max: 0.87, k_max: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// per-patch segment id, 0-based, numbered by lowest member patch index
    pub labels: Vec<usize>,
    /// patch indices per segment, each sorted ascending
    pub segments: Vec<Vec<usize>>,
    /// per-segment mean relevance score; filled by `score_segments`
    pub scores: Vec<f64>,
    pub threshold_used: f64,
}

fn cosine_distances(v: &Tensor) -> Result<Vec<Vec<f64>>> {
    let sims = pairwise_cosine(v, v)?;
    let n = v.rows();
    Ok((0..n)
        .map(|i| (0..n).map(|j| 1.0 - sims.data()[i * n + j]).collect())
        .collect())
}

fn mean_linkage(dist: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
    let mut s = 0.0;
    for &i in a {
        for &j in b {
            s += dist[i][j];
        }
    }
    s / (a.len() * b.len()) as f64
}

fn cluster_from_distances(dist: &[Vec<f64>], t: f64) -> Vec<Vec<usize>> {
    let n = dist.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        if clusters.len() < 2 {
            break;
        }
        // find the minimal mean-linkage pair; ties go to the pair whose
        // (lowest, other-lowest) patch indices are lexicographically smallest
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let d = mean_linkage(dist, &clusters[a], &clusters[b]);
                let better = match best {
                    None => true,
                    Some((bd, ba, bb)) => {
                        d < bd
                            || (d == bd
                                && (clusters[a][0], clusters[b][0])
                                    < (clusters[ba][0], clusters[bb][0]))
                    }
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        let (d, a, b) = best.unwrap();
        if d >= t {
            break;
        }
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
        // keep clusters ordered by lowest member so tie-breaks stay stable
        clusters.sort_by_key(|c| c[0]);
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}

/// Mean-linkage agglomerative clustering over 1 − cosine. Merging stops
/// when the closest pair of clusters is at distance ≥ t.
pub fn mean_linkage_cluster(v_prime: &Tensor, t: f64) -> Result<Vec<usize>> {
    let dist = cosine_distances(v_prime)?;
    let clusters = cluster_from_distances(&dist, t);
    let mut labels = vec![0usize; v_prime.rows()];
    for (id, c) in clusters.iter().enumerate() {
        for &p in c {
            labels[p] = id;
        }
    }
    Ok(labels)
}

/// Adaptive threshold loop: lower t while one segment dominates, raise it
/// while the segmentation shatters, and keep the last clustering.
pub fn adaptive_segment(v_prime: &Tensor, params: &SegmentParams) -> Result<Segmentation> {
    let n = v_prime.rows();
    let dist = cosine_distances(v_prime)?;
    let mut t = params.t_init;
    let mut clusters = cluster_from_distances(&dist, t);
    for _ in 1..params.n_iter {
        let largest = clusters.iter().map(|c| c.len()).max().unwrap_or(0);
        if largest as f64 / n as f64 > params.r_max {
            t -= params.delta_t;
        } else if clusters.len() > params.k_max {
            t += params.delta_t;
        } else {
            break;
        }
        clusters = cluster_from_distances(&dist, t);
    }
    let mut labels = vec![0usize; n];
    for (id, c) in clusters.iter().enumerate() {
        for &p in c {
            labels[p] = id;
        }
    }
    Ok(Segmentation { labels, segments: clusters, scores: Vec::new(), threshold_used: t })
}

/// s_k = mean of the per-patch relevance scores over segment k.
pub fn score_segments(seg: &mut Segmentation, s_l2v: &[f64]) {
    assert_eq!(s_l2v.len(), seg.labels.len(), "score length must match patch count");
    seg.scores = seg
        .segments
        .iter()
        .map(|c| c.iter().map(|&p| s_l2v[p]).sum::<f64>() / c.len() as f64)
        .collect();
}

/// Segments scoring strictly above τ_V form the intersection set; everything
/// else (including exact ties) is the difference set.
pub fn split_by_threshold(seg: &Segmentation, tau_v: f64) -> (Vec<usize>, Vec<usize>) {
    assert_eq!(seg.scores.len(), seg.segments.len(), "segments must be scored first");
    let mut inter = Vec::new();
    let mut diff = Vec::new();
    for (k, &s) in seg.scores.iter().enumerate() {
        if s > tau_v {
            inter.push(k);
        } else {
            diff.push(k);
        }
    }
    (inter, diff)
}

/// Adjusted Rand Index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for i in 0..n {
        table[a[i]][b[i]] += 1;
    }
    let c2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&x| c2(x)).sum();
    let sum_a: f64 = (0..ka).map(|i| c2(table[i].iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| c2((0..ka).map(|i| table[i][j]).sum()))
        .sum();
    let expected = sum_a * sum_b / c2(n);
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}
