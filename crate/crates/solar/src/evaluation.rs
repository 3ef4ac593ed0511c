//! Retrieval metrics: Recall@k over a candidate pool, triplet Precision with
//! the variant substitution rule, mR/Avg aggregation, and percentile
//! bootstrap confidence intervals.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};
use crate::numerics::{cosine, pairwise_cosine};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkTriplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

impl BenchmarkTriplet {
    pub fn validate(&self) -> Result<()> {
        let mut ids = vec![&self.anchor, &self.positive, &self.negative];
        if let Some(v) = &self.variant {
            ids.push(v);
        }
        let mut uniq = ids.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != ids.len() {
            return Err(SolarError::Config(format!(
                "triplet ids not distinct: {} / {} / {}",
                self.anchor, self.positive, self.negative
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub m_r: f64,
    pub precision: f64,
    pub avg: f64,
    pub n_queries: usize,
    pub bootstrap_ci: BootstrapCi,
}

/// Recall@k (×100) per k: fraction of queries whose target ranks in the top
/// k of the pool by cosine. A pool row tied with the target and carrying a
/// lower id ranks ahead of it.
pub fn recall_at_k(
    query_embeds: &Tensor,
    target_ids: &[usize],
    pool_embeds: &Tensor,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let nq = query_embeds.rows();
    if target_ids.len() != nq {
        return Err(SolarError::Shape(format!(
            "{} queries but {} targets",
            nq,
            target_ids.len()
        )));
    }
    let c = pool_embeds.rows();
    for (q, &t) in target_ids.iter().enumerate() {
        if t >= c {
            return Err(SolarError::Config(format!(
                "query {q}: target {t} not in pool of {c}"
            )));
        }
    }
    let sims = pairwise_cosine(query_embeds, pool_embeds)?;
    let mut recalls = vec![0.0; ks.len()];
    for q in 0..nq {
        let row = &sims.data()[q * c..(q + 1) * c];
        let t = target_ids[q];
        let st = row[t];
        let rank = 1 + (0..c)
            .filter(|&j| j != t && (row[j] > st || (row[j] == st && j < t)))
            .count();
        for (ki, &k) in ks.iter().enumerate() {
            if rank <= k {
                recalls[ki] += 1.0;
            }
        }
    }
    Ok(recalls.iter().map(|r| 100.0 * r / nq as f64).collect())
}

/// Triplet precision (×100) plus the per-triplet indicators used for the
/// bootstrap. When a variant X′ exists, the negative is compared against the
/// variant's embedding instead of the anchor's; ties count as failure.
pub fn precision(
    triplets: &[BenchmarkTriplet],
    embeds: &BTreeMap<String, Vec<f64>>,
) -> Result<(f64, Vec<f64>)> {
    if triplets.is_empty() {
        return Err(SolarError::Config("no triplets to evaluate".into()));
    }
    let get = |id: &str| -> Result<&Vec<f64>> {
        embeds
            .get(id)
            .ok_or_else(|| SolarError::Config(format!("missing embedding for sample {id}")))
    };
    let mut indicators = Vec::with_capacity(triplets.len());
    for t in triplets {
        let f = get(&t.anchor)?;
        let f_pos = get(&t.positive)?;
        let f_neg = get(&t.negative)?;
        let f_ref = match &t.variant {
            Some(v) => get(v)?,
            None => f,
        };
        let s_pos = cosine(f_pos, f)?;
        let s_neg = cosine(f_neg, f_ref)?;
        indicators.push(if s_pos > s_neg { 1.0 } else { 0.0 });
    }
    let p = 100.0 * indicators.iter().sum::<f64>() / indicators.len() as f64;
    Ok((p, indicators))
}

/// Table-style aggregation: mR = mean recall, Avg = (mR + Precision)/2.
pub fn aggregate(
    recalls: &[f64; 3],
    precision: f64,
    n_queries: usize,
    bootstrap_ci: BootstrapCi,
) -> MetricsReport {
    let m_r = (recalls[0] + recalls[1] + recalls[2]) / 3.0;
    MetricsReport {
        recall_at_1: recalls[0],
        recall_at_5: recalls[1],
        recall_at_10: recalls[2],
        m_r,
        precision,
        avg: (m_r + precision) / 2.0,
        n_queries,
        bootstrap_ci,
    }
}

/// Percentile bootstrap over per-triplet success indicators; returns the CI
/// bounds in percent.
pub fn bootstrap_ci(indicators: &[f64], iters: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    let n = indicators.len();
    if n < 2 {
        return Err(SolarError::Config(format!("bootstrap needs >= 2 indicators, got {n}")));
    }
    let mut rng = stream(seed, 0xb007);
    let mut means = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut s = 0.0;
        for _ in 0..n {
            s += indicators[rng.gen_range(0..n)];
        }
        means.push(100.0 * s / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| means[((q * (iters - 1) as f64).round() as usize).min(iters - 1)];
    Ok(BootstrapCi { level, lower: pick(alpha), upper: pick(1.0 - alpha) })
}

pub fn render_table(report: &MetricsReport) -> String {
    let header = format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "R@1", "R@5", "R@10", "mR", "Prec.", "Avg."
    );
    let row = format!(
        "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
        report.recall_at_1,
        report.recall_at_5,
        report.recall_at_10,
        report.m_r,
        report.precision,
        report.avg
    );
    let ci = format!(
        "Precision {:.0}% CI: [{:.2}, {:.2}]  (n={})",
        report.bootstrap_ci.level * 100.0,
        report.bootstrap_ci.lower,
        report.bootstrap_ci.upper,
        report.n_queries
    );
    format!("{header}\n{row}\n{ci}\n")
}

pub fn save_triplets(triplets: &[BenchmarkTriplet], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for t in triplets {
        writeln!(f, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}

pub fn load_triplets(path: &Path) -> Result<Vec<BenchmarkTriplet>> {
    let f = std::fs::File::open(path)
        .map_err(|e| SolarError::Load(format!("{}: {}", path.display(), e)))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let t: BenchmarkTriplet = serde_json::from_str(&line?)?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};

    fn unit_rows(seed: u64, m: usize, d: usize) -> Tensor {
        let mut rng = stream(seed, 0xeba1);
        let mut rows = Vec::with_capacity(m);
        for _ in 0..m {
            let mut r: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
            rows.push(r);
        }
        Tensor::from_rows(&rows)
    }

    #[test]
    fn singleton_pool_perfect_recall() {
        let q = unit_rows(1, 3, 4);
        let r = recall_at_k(&q, &[0, 0, 0], &q.clone(), &[1]).unwrap();
        // pool row 0 is each query's target; rows 1,2 are distractors
        let pool = q.clone();
        let r1 = recall_at_k(&q, &[0, 1, 2], &pool, &[1, 5, 10]).unwrap();
        assert_eq!(r1, vec![100.0, 100.0, 100.0]);
        assert!(r[0] <= 100.0);
    }

    #[test]
    fn matches_full_sort_oracle() {
        let q = unit_rows(2, 100, 6);
        let pool = unit_rows(3, 300, 6);
        let targets: Vec<usize> = (0..100).map(|i| (i * 3) % 300).collect();
        let ks = [1, 5, 10];
        let ours = recall_at_k(&q, &targets, &pool, &ks).unwrap();
        let mut hits = [0usize; 3];
        for i in 0..q.rows() {
            let sims: Vec<f64> = (0..pool.rows())
                .map(|j| cosine(q.row(i), pool.row(j)).unwrap())
                .collect();
            let mut order: Vec<usize> = (0..pool.rows()).collect();
            order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
            let rank = order.iter().position(|&j| j == targets[i]).unwrap() + 1;
            for (ki, &k) in ks.iter().enumerate() {
                if rank <= k {
                    hits[ki] += 1;
                }
            }
        }
        for ki in 0..3 {
            assert!((ours[ki] - hits[ki] as f64).abs() < 1e-9);
        }
        assert!(ours[0] <= ours[1] && ours[1] <= ours[2]);
    }

    #[test]
    fn precision_rules() {
        let mut embeds = BTreeMap::new();
        embeds.insert("a".to_string(), vec![1.0, 0.0]);
        embeds.insert("p".to_string(), vec![0.9, (1.0f64 - 0.81).sqrt()]);
        embeds.insert("n".to_string(), vec![0.5, (1.0f64 - 0.25).sqrt()]);
        embeds.insert("v".to_string(), vec![0.0, 1.0]);

        let plain = BenchmarkTriplet {
            anchor: "a".into(),
            positive: "p".into(),
            negative: "n".into(),
            variant: None,
        };
        let (p, ind) = precision(&[plain.clone()], &embeds).unwrap();
        assert_eq!(p, 100.0);
        assert_eq!(ind, vec![1.0]);

        // exact tie counts as failure
        let mut tie_embeds = embeds.clone();
        tie_embeds.insert("p".to_string(), vec![0.5, (1.0f64 - 0.25).sqrt()]);
        let (p_tie, _) = precision(&[plain.clone()], &tie_embeds).unwrap();
        assert_eq!(p_tie, 0.0);

        // variant rule: negative compared against the variant, not the anchor
        let with_variant = BenchmarkTriplet { variant: Some("v".into()), ..plain };
        // cos(n, v) ~ 0.866 > cos(p, a) = 0.9? no: 0.866 < 0.9 -> still 1;
        // flip by making the positive weaker
        let mut weak = embeds.clone();
        weak.insert("p".to_string(), vec![0.6, 0.8]);
        let (p_var, _) = precision(&[with_variant], &weak).unwrap();
        let s_pos = cosine(&weak["p"], &weak["a"]).unwrap();
        let s_neg = cosine(&weak["n"], &weak["v"]).unwrap();
        assert_eq!(p_var, if s_pos > s_neg { 100.0 } else { 0.0 });
        assert!(s_neg > s_pos, "fixture should exercise the variant rule");
    }

    #[test]
    fn aggregate_matches_reference_arithmetic() {
        let ci = BootstrapCi { level: 0.95, lower: 0.0, upper: 100.0 };
        let r = aggregate(&[77.57, 97.20, 97.66], 84.58, 200, ci.clone());
        assert!((r.m_r - 90.81).abs() < 0.005);
        assert!((r.avg - 87.69).abs() < 0.005);
        let perfect = aggregate(&[100.0, 100.0, 100.0], 100.0, 1, ci.clone());
        assert_eq!(perfect.avg, 100.0);
        let zero = aggregate(&[0.0, 0.0, 0.0], 0.0, 1, ci);
        assert_eq!(zero.avg, 0.0);
    }

    #[test]
    fn bootstrap_properties() {
        let all_ones = vec![1.0; 50];
        let ci = bootstrap_ci(&all_ones, 1000, 0.95, 5).unwrap();
        assert_eq!((ci.lower, ci.upper), (100.0, 100.0));

        let mixed: Vec<f64> = (0..60).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let point = 100.0 * mixed.iter().sum::<f64>() / mixed.len() as f64;
        let ci = bootstrap_ci(&mixed, 10_000, 0.95, 6).unwrap();
        assert!(ci.lower <= point && point <= ci.upper);
        let ci2 = bootstrap_ci(&mixed, 10_000, 0.95, 6).unwrap();
        assert_eq!((ci.lower, ci.upper), (ci2.lower, ci2.upper));
    }

    #[test]
    fn triplet_round_trip_and_validation() {
        let ts = vec![
            BenchmarkTriplet {
                anchor: "a0".into(),
                positive: "p0".into(),
                negative: "n0".into(),
                variant: Some("v0".into()),
            },
            BenchmarkTriplet {
                anchor: "a1".into(),
                positive: "p1".into(),
                negative: "n1".into(),
                variant: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");
        save_triplets(&ts, &path).unwrap();
        let back = load_triplets(&path).unwrap();
        assert_eq!(serde_json::to_string(&ts).unwrap(), serde_json::to_string(&back).unwrap());

        let bad = BenchmarkTriplet {
            anchor: "x".into(),
            positive: "x".into(),
            negative: "n".into(),
            variant: None,
        };
        assert!(bad.validate().is_err());
    }
}
